#include "vifeedit/trainer.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>
#include <cstring>
#include <set>
#include <sstream>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.blocks = 1;
  c.dim = 24;
  c.heads = 2;
  c.time_dim = 8;
  c.ffn_hidden = 32;
  c.patch = 4;
  c.num_tasks = 8;
  return c;
}

std::vector<TrainingPair> pairs(const EditTask& task, int n, std::uint64_t seed, int size = 16) {
  std::vector<TrainingPair> out;
  for (int i = 0; i < n; ++i) {
    const SceneSpec spec = random_scene(task, scene_seed(seed, i, SeedDomain::train), 1, size, size);
    VideoPair vp = apply_edit_oracle(spec, task);
    out.push_back({std::move(vp.source), std::move(vp.target), task_id(task)});
  }
  return out;
}

TrainConfig quick_config(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.learning_rate = 1e-3;
  tc.seed = 21;
  tc.rank = 4;
  return tc;
}

EditModel small_model(Method method = Method::vifeedit) { return make_model(small_config(), method, 4, 1, 2); }

std::vector<Tensor<float>> values(const std::vector<Param<float>*>& ps) {
  std::vector<Tensor<float>> out;
  for (auto* p : ps) out.push_back(p->value);
  return out;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vifeedit_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("flow state algebra") {
  const Tensor<double> z0({2}, {0.0, 0.0}), eps({2}, {2.0, 2.0});
  const auto mid = noisy_interpolate(z0, eps, 0.5);
  CHECK(mid.zt[0] == 1.0);
  CHECK(mid.vt[1] == 2.0);

  const Tensor<double> a({3}, {0.3, -1.0, 0.7}), e({3}, {1.1, 0.2, -0.4});
  const auto start = noisy_interpolate(a, e, 0.0);
  CHECK(start.zt.bit_equal(a));
  const auto end = noisy_interpolate(a, e, 1.0);
  CHECK(end.zt.bit_equal(e));
  for (Index i = 0; i < 3; ++i) CHECK(start.vt[i] == e[i] - a[i]);

  CHECK_THROWS_AS(noisy_interpolate(a, Tensor<double>({2}), 0.5), ShapeError);
  CHECK_THROWS_AS(noisy_interpolate(a, e, 1.5), std::invalid_argument);
}

TEST_CASE("fm_loss values") {
  Graph<double> g;
  const Tensor<double> v({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(fm_loss(g.constant(v), g.constant(v)).value().item() == 0.0);
  Tensor<double> shifted = v;
  shifted.data() += 0.5;
  CHECK(fm_loss(g.constant(shifted), g.constant(v)).value().item() == doctest::Approx(0.25).epsilon(1e-15));

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<float> p({40}), q({40});
  double oracle = 0.0;
  for (Index i = 0; i < 40; ++i) {
    p[i] = static_cast<float>(nd(rng));
    q[i] = static_cast<float>(nd(rng));
    const double d = static_cast<double>(p[i]) - static_cast<double>(q[i]);
    oracle += d * d;
  }
  oracle /= 40.0;
  Graph<float> gf;
  const double got = fm_loss(gf.constant(p), gf.constant(q)).value().item();
  CHECK(std::abs(got - oracle) <= 1e-6 * oracle);
}

TEST_CASE("one training step leaves every frozen parameter bit-identical") {
  EditModel m = small_model();
  std::vector<Param<float>*> frozen;
  for (auto* p : m.params()) {
    if (!p->trainable) frozen.push_back(p);
  }
  const auto before = values(frozen);
  const auto trainable_before = values(m.trainable());
  const TrainConfig tc = quick_config(1);
  TrainState st = init_train_state(m, tc);
  const auto data = pairs(ChannelPermute{}, 4, 1);
  const double loss = train_step(data, m, st, tc);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(frozen[i]->value.bit_equal(before[i]));
  bool moved = false;
  const auto trainable = m.trainable();
  for (std::size_t i = 0; i < trainable.size(); ++i) moved |= !trainable[i]->value.bit_equal(trainable_before[i]);
  CHECK(moved);
  CHECK(st.step == 1);
}

TEST_CASE("untrained loss matches the explicit flow-matching expectation") {
  EditModel m = small_model();
  const TrainConfig tc = quick_config(1);
  TrainState st = init_train_state(m, tc);
  const auto data = pairs(ChannelPermute{}, 2, 4);

  // Rebuild the step's draws from the public stream and evaluate by hand.
  auto rng = step_rng(tc.seed, 0, 0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> t{uniform(rng), uniform(rng)};
  Tensor<float> src({2, 1, 16, 16, 3}), tgt({2, 1, 16, 16, 3});
  const Index n = data[0].source.size();
  for (int i = 0; i < 2; ++i) {
    std::copy_n(data[i].source.ptr(), n, src.ptr() + i * n);
    std::copy_n(data[i].target.ptr(), n, tgt.ptr() + i * n);
  }
  const Tensor<float> c = to_patches(src, 4), z0 = to_patches(tgt, 4);
  Tensor<float> eps(z0.shape());
  for (Index i = 0; i < eps.size(); ++i) eps[i] = static_cast<float>(normal(rng));
  Tensor<float> zt(z0.shape()), vt(z0.shape());
  const Index per = z0.size() / 2;
  double expected = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (Index k = 0; k < per; ++k) {
      const Index j = i * per + k;
      zt[j] = static_cast<float>(t[i]) * eps[j] + static_cast<float>(1.0 - t[i]) * z0[j];
      vt[j] = eps[j] - z0[j];
    }
  }
  Graph<float> g(false);
  const int tasks[2] = {0, 0};
  const auto pred = m.velocity(g, zt, c, GridGeometry{1, 4, 4}, tasks, t).value();
  for (Index j = 0; j < pred.size(); ++j) {
    const double d = static_cast<double>(pred[j]) - vt[j];
    expected += d * d;
  }
  expected /= static_cast<double>(pred.size());

  const double loss = train_step(data, m, st, tc);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
  const auto data = pairs(ChannelPermute{}, 8, 2);
  auto run = [&] {
    EditModel m = small_model();
    TrainConfig tc = quick_config(1);
    tc.batch_size = 2;
    TrainState st = init_train_state(m, tc);
    std::vector<double> losses;
    for (int s = 0; s < 10; ++s) {
      const std::span<const TrainingPair> all(data);
      losses.push_back(train_step(all.subspan((s % 4) * 2, 2), m, st, tc));
    }
    return losses;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::memcmp(&a[i], &b[i], sizeof(double)) == 0);
}

TEST_CASE("zero epochs leave the adapter at its initial value") {
  EditModel m = small_model();
  const auto before = values(m.params());
  const TrainConfig tc = quick_config(0);
  TrainState st = init_train_state(m, tc);
  const auto records = train(pairs(ChannelPermute{}, 4, 3), m, st, tc);
  CHECK(records.empty());
  const auto params = m.params();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value.bit_equal(before[i]));
}

TEST_CASE("loss falls over epochs on channel permutation") {
  EditModel m = small_model();
  TrainConfig tc = quick_config(12);
  TrainState st = init_train_state(m, tc);
  std::vector<double> epoch_loss;
  TrainOptions opt;
  opt.on_epoch = [&](const TrainState&, double loss) { epoch_loss.push_back(loss); };
  train(pairs(ChannelPermute{}, 32, 5), m, st, tc, opt);
  REQUIRE(epoch_loss.size() == 12);
  CHECK(epoch_loss.back() < epoch_loss.front());
}

TEST_CASE("multi-task training logs per-task losses to CSV") {
  auto data = pairs(ChannelPermute{}, 6, 6);
  const auto more = pairs(ShapeRemove{}, 6, 7);
  data.insert(data.end(), more.begin(), more.end());
  EditModel m = small_model();
  const TrainConfig tc = quick_config(2);
  TrainState st = init_train_state(m, tc);
  const fs::path dir = scratch_dir("trainer_csv");
  TrainOptions opt;
  opt.loss_csv = dir / "loss.csv";
  opt.checkpoint_dir = dir / "ck";
  const auto records = train(data, m, st, tc, opt);
  std::set<int> tasks;
  for (const auto& r : records) {
    tasks.insert(r.task_id);
    CHECK(std::isfinite(r.loss));
  }
  CHECK(tasks == std::set<int>{0, 2});
  std::istringstream csv(read_file(opt.loss_csv));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "step,epoch,task_id,loss");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == records.size());
  CHECK(fs::exists(opt.checkpoint_dir / "latest.vfck"));
}

TEST_CASE("unfreezing a base parameter trips the frozen-base check") {
  EditModel m = small_model();
  m.base.blocks[0].attn.q_weight.trainable = true;
  const TrainConfig tc = quick_config(1);
  TrainState st = init_train_state(m, tc);
  CHECK(st.optimizer.first_moment.size() == m.trainable().size());
  try {
    train(pairs(ChannelPermute{}, 4, 8), m, st, tc);
    FAIL("expected a frozen-base violation");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("blocks.0.attn.q.weight") != std::string::npos);
  }
}

TEST_CASE("resume reproduces the next-step loss") {
  const auto data = pairs(ChannelPermute{}, 8, 9);
  TrainConfig tc = quick_config(3);
  tc.batch_size = 8;
  const fs::path dir = scratch_dir("trainer_resume");

  EditModel full = small_model();
  TrainState full_state = init_train_state(full, tc);
  const auto all = train(data, full, full_state, tc);

  EditModel part = small_model();
  TrainState part_state = init_train_state(part, tc);
  TrainConfig two = tc;
  two.epochs = 2;
  TrainOptions opt;
  opt.checkpoint_dir = dir;
  train(data, part, part_state, two, opt);

  TrainState resumed_state;
  EditModel resumed = resume_from(load_checkpoint(dir / "latest.vfck"), resumed_state, tc);
  CHECK(resumed_state.epoch == 2);
  CHECK(resumed_state.step == 2);
  const auto rest = train(data, resumed, resumed_state, tc);
  REQUIRE(rest.size() == 1);
  CHECK(rest[0].loss == all.back().loss);
  const auto a = full.params(), b = resumed.params();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.bit_equal(b[i]->value));
}

TEST_CASE("training rejects bad configs and ragged batches") {
  EditModel m = small_model();
  TrainConfig tc = quick_config(1);
  TrainState st = init_train_state(m, tc);
  TrainConfig bad = tc;
  bad.schedule = "cosine";
  CHECK_THROWS_AS(train(pairs(ChannelPermute{}, 2, 1), m, st, bad), std::invalid_argument);
  bad = tc;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(train({}, m, st, tc), std::invalid_argument);
  auto mixed = pairs(ChannelPermute{}, 1, 1, 16);
  const auto big = pairs(ChannelPermute{}, 1, 2, 32);
  mixed.push_back(big[0]);
  CHECK_THROWS_AS(train_step(mixed, m, st, tc), ShapeError);
}

TEST_CASE("direct tuning trains the base projections only") {
  EditModel m = small_model(Method::direct_tuning);
  std::vector<Param<float>*> frozen;
  for (auto* p : m.params()) {
    if (!p->trainable) frozen.push_back(p);
  }
  const auto before = values(frozen);
  TrainConfig tc = quick_config(1);
  TrainState st = init_train_state(m, tc);
  train(pairs(ChannelPermute{}, 4, 10), m, st, tc);
  for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(frozen[i]->value.bit_equal(before[i]));
  CHECK(m.base.blocks[0].attn.q_weight.trainable);
  CHECK_FALSE(m.base.patch_weight.trainable);
}
