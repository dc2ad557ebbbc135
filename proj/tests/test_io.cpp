#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "pformer/checkpoint.hpp"
#include "pformer/dataset_io.hpp"
#include "pformer/errors.hpp"
#include "pformer/kv_config.hpp"
#include "support.hpp"

using namespace pformer;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pformer_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Checkpoint sample_checkpoint(bool with_state) {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_layers = 1;
  c.ff_hidden = 6;
  c.decoder_hidden = 5;
  c.feed_back_object_motion = true;
  std::mt19937_64 rng(3);
  Checkpoint ck{oracle::random_params(c, rng), {"rope", {Material::kRope, Material::kEffector}}, std::nullopt};
  if (with_state) {
    TrainingState st;
    st.epochs_completed = 4;
    st.optimizer.step = 77;
    ck.params.for_each_block([&](const std::string&, const Mat& m) {
      st.optimizer.first_moment.push_back(oracle::random_matrix(rng, static_cast<int>(m.rows()), static_cast<int>(m.cols())));
      st.optimizer.second_moment.push_back(oracle::random_matrix(rng, static_cast<int>(m.rows()), static_cast<int>(m.cols())).cwiseAbs());
    });
    st.loss_curve = {0.5, 0.25, 1.0 / 3.0, 1e-300};
    ck.training = st;
  }
  return ck;
}

bool same_bits(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

}  // namespace

TEST(KvConfig, ParsesCommentsAndWhitespace) {
  const KvConfig kv = KvConfig::parse("# header\n a = 1 \nname=box_push # trailing\n\nlist = 1, 2,3\nflag = true\n");
  EXPECT_EQ(kv.get_int("a"), 1);
  EXPECT_EQ(kv.get_string("name"), "box_push");
  EXPECT_EQ(kv.get_doubles("list"), (std::vector<double>{1, 2, 3}));
  EXPECT_TRUE(kv.get_bool("flag", false));
  EXPECT_EQ(kv.get_double("missing", 2.5), 2.5);
}

TEST(KvConfig, RejectsMalformedInput) {
  EXPECT_THROW(KvConfig::parse("just text\n"), InvalidInput);
  EXPECT_THROW(KvConfig::parse(" = 3\n"), InvalidInput);
  EXPECT_THROW(KvConfig::parse("a = 1\na = 2\n"), InvalidInput);
  const KvConfig kv = KvConfig::parse("a = x\nb = 1.5\n");
  EXPECT_THROW(kv.get_double("a"), InvalidInput);
  EXPECT_THROW(kv.get_int("b"), InvalidInput);
  EXPECT_THROW(kv.get_string("c"), InvalidInput);
}

TEST(KvConfig, CanonicalTextRoundTrips) {
  KvConfig kv;
  kv.set_number("x", 0.1);
  kv.set_number("n", 42);
  kv.set("s", "hello");
  const KvConfig back = KvConfig::parse(kv.to_text());
  EXPECT_EQ(back.values(), kv.values());
  EXPECT_EQ(back.get_double("x"), 0.1);
}

TEST(KvConfig, FormatDoubleIsShortestRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
}

TEST(Checkpoint, EncodeDecodeIsBitwise) {
  for (bool with_state : {false, true}) {
    const Checkpoint ck = sample_checkpoint(with_state);
    const std::string bytes = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_TRUE(back.params == ck.params);
    EXPECT_EQ(back.params.config, ck.params.config);
    EXPECT_EQ(back.meta, ck.meta);
    ASSERT_EQ(back.training.has_value(), with_state);
    if (with_state) {
      EXPECT_EQ(back.training->optimizer.step, 77u);
      EXPECT_EQ(back.training->loss_curve, ck.training->loss_curve);
      for (std::size_t i = 0; i < ck.training->optimizer.first_moment.size(); ++i) {
        EXPECT_TRUE(same_bits(back.training->optimizer.second_moment[i], ck.training->optimizer.second_moment[i]));
      }
    }
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const fs::path dir = scratch_dir("ckpt");
  const Checkpoint ck = sample_checkpoint(true);
  save_checkpoint(ck, dir / "model.bin");
  const Checkpoint back = load_checkpoint(dir / "model.bin");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  EXPECT_THROW(load_checkpoint(dir / "absent.bin"), IoError);
}

TEST(Checkpoint, RejectsTamperedBytes) {
  const std::string bytes = encode_checkpoint(sample_checkpoint(true));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad[8] = 9;  // version
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 5)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(decode_checkpoint(""), FormatError);
}

TEST(Dataset, RoundTripIsBitwise) {
  const Dataset ds = generate_dataset(TaskSpec::defaults(TaskId::kRopeSweep), 3, 10, 5);
  const std::string bytes = encode_dataset(ds);
  const Dataset back = decode_dataset(bytes);
  EXPECT_EQ(encode_dataset(back), bytes);
  EXPECT_EQ(back.spec, ds.spec);
  ASSERT_EQ(back.episodes.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(back.episodes[e].materials, ds.episodes[e].materials);
    for (int t = 0; t < 10; ++t) {
      EXPECT_TRUE(same_bits(back.episodes[e].positions[t], ds.episodes[e].positions[t]));
      EXPECT_TRUE(same_bits(back.episodes[e].motions[t], ds.episodes[e].motions[t]));
    }
  }
}

TEST(Dataset, FileRoundTripAndDigestStability) {
  const fs::path dir = scratch_dir("dataset");
  const TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  save_dataset(generate_dataset(spec, 3, 10, 1), dir / "a.bin");
  save_dataset(generate_dataset(spec, 3, 10, 1), dir / "b.bin");
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(digest_hex(read(dir / "a.bin")), digest_hex(read(dir / "b.bin")));
  EXPECT_EQ(digest_hex(read(dir / "a.bin")).size(), 16u);
  const Dataset back = load_dataset(dir / "a.bin");
  EXPECT_EQ(back.episodes.size(), 3u);
  EXPECT_EQ(back.episodes[0].horizon(), 10);
  EXPECT_NE(digest_hex(encode_dataset(generate_dataset(spec, 3, 10, 2))), digest_hex(read(dir / "a.bin")));
}

TEST(Dataset, RejectsTamperedBytes) {
  const std::string bytes = encode_dataset(generate_dataset(TaskSpec::defaults(TaskId::kRope), 1, 3, 0));
  std::string bad = bytes;
  bad[3] = '?';
  EXPECT_THROW(decode_dataset(bad), FormatError);
  EXPECT_THROW(decode_dataset(bytes.substr(0, 40)), FormatError);
  EXPECT_THROW(load_dataset("/nonexistent/dir/x.bin"), IoError);
}

TEST(Digest, KnownFnvVectors) {
  EXPECT_EQ(digest_hex(""), "cbf29ce484222325");
  EXPECT_EQ(digest_hex("a"), "af63dc4c8601ec8c");
}
