#include "vifeedit/model.hpp"
#include "vifeedit/trainer.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.blocks = 2;
  c.dim = 24;
  c.heads = 2;
  c.time_dim = 8;
  c.ffn_hidden = 32;
  c.num_tasks = 3;
  return c;
}

std::string message_of(const std::string& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

void put_u32(std::string& s, std::size_t at, std::uint32_t v) { std::memcpy(&s[at], &v, 4); }

}  // namespace

TEST_CASE("model checkpoints round-trip every parameter bit-exactly") {
  EditModel m = make_model(small_config(), Method::vifeedit, 4, 3, 4);
  m.adapter.blocks[1].ffn2.up.value[5] = 0.125f;
  const std::string bytes = encode_checkpoint(model_checkpoint(m, nullptr, {{"note", "x"}}));
  const Checkpoint ck = decode_checkpoint(bytes);
  CHECK(ck.metadata.at("note") == "x");
  CHECK(ck.metadata.at("method") == "vifeedit");
  EditModel back = load_model(ck);
  const auto a = m.params(), b = back.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->trainable == b[i]->trainable);
    CHECK(a[i]->role == b[i]->role);
    CHECK(a[i]->value.bit_equal(b[i]->value));
  }
  CHECK(encode_checkpoint(model_checkpoint(back, nullptr, {{"note", "x"}})) == bytes);
}

TEST_CASE("direct-tuning checkpoints keep their trainable set") {
  EditModel m = make_model(small_config(), Method::direct_tuning, 4, 3, 4);
  EditModel back = load_model(decode_checkpoint(encode_checkpoint(model_checkpoint(m, nullptr))));
  CHECK(back.method == Method::direct_tuning);
  CHECK(back.trainable().size() == m.trainable().size());
  CHECK(back.base.blocks[1].ffn2_weight.trainable);
}

TEST_CASE("optimizer moments survive a checkpoint") {
  EditModel m = make_model(small_config(), Method::vifeedit, 4, 3, 4);
  TrainConfig tc;
  tc.rank = 4;
  TrainState st = init_train_state(m, tc);
  st.optimizer.step = 7;
  st.optimizer.first_moment[2][0] = 0.5f;
  st.optimizer.second_moment[3][1] = 0.25f;
  OptimizerState<float> restored;
  EditModel back = load_model(decode_checkpoint(encode_checkpoint(model_checkpoint(m, &st.optimizer))), &restored);
  CHECK(restored.step == 7);
  REQUIRE(restored.first_moment.size() == st.optimizer.first_moment.size());
  CHECK(restored.first_moment[2].bit_equal(st.optimizer.first_moment[2]));
  CHECK(restored.second_moment[3].bit_equal(st.optimizer.second_moment[3]));
}

TEST_CASE("checkpoint decoding errors name the byte offset") {
  EditModel m = make_model(small_config(), Method::vifeedit, 4, 3, 4);
  const std::string good = encode_checkpoint(model_checkpoint(m, nullptr));

  CHECK(message_of(good.substr(0, 100)).find("truncated at byte offset 100") != std::string::npos);
  std::string magic = good;
  magic[1] = 'X';
  CHECK(message_of(magic).find("bad magic at byte offset 0") != std::string::npos);
  std::string version = good;
  put_u32(version, 4, 2);
  CHECK(message_of(version).find("version 2 at byte offset 4") != std::string::npos);
  std::string meta = good;
  meta[12] = '#';
  CHECK(message_of(meta).find("byte offset 12") != std::string::npos);
  CHECK(message_of(good + "z").find("trailing data at byte offset " + std::to_string(good.size())) !=
        std::string::npos);
}

TEST_CASE("restoring into a mismatched model fails loudly") {
  EditModel m = make_model(small_config(), Method::vifeedit, 4, 3, 4);
  const Checkpoint ck = model_checkpoint(m, nullptr);
  ModelConfig wider = small_config();
  wider.dim = 32;
  wider.heads = 4;
  EditModel other = make_model(wider, Method::vifeedit, 4, 3, 4);
  const auto params = other.params();
  CHECK_THROWS_AS(restore_params(ck, params), ShapeError);
  CHECK_THROWS_AS(ck.find("nope"), std::out_of_range);
}

TEST_CASE("checkpoint files are written atomically and read back") {
  const fs::path dir = fs::temp_directory_path() / "vifeedit_test_ck";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EditModel m = make_model(small_config(), Method::vifeedit, 4, 3, 4);
  save_checkpoint(dir / "a.vfck", model_checkpoint(m, nullptr));
  CHECK(fs::exists(dir / "a.vfck"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir)) files += e.is_regular_file();
  CHECK(files == 1);
  EditModel back = load_model(load_checkpoint(dir / "a.vfck"));
  CHECK(back.base.prompt_table.value.bit_equal(m.base.prompt_table.value));
  try {
    load_checkpoint(dir / "missing.vfck");
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("missing.vfck") != std::string::npos);
  }
}

TEST_CASE("model config JSON rejects unknown keys") {
  const ModelConfig c = small_config();
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  CHECK(back.dim == c.dim);
  CHECK(back.blocks == c.blocks);
  CHECK_THROWS_AS(model_config_from_json({{"depth", 3}}), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json({{"heads", 5}}), std::invalid_argument);
  CHECK_THROWS_AS(method_from_name("lora"), std::invalid_argument);
}
