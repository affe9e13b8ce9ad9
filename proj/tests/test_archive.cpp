#include <gtest/gtest.h>

#include <fstream>

#include <json.hpp>

#include "himo/archive.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidArgument;
}

HoiSequence generated(int index = 0) {
  const ToyBodyModel body;
  HoiSequence s = generate_sequence(test::small_corpus_config(), index, body, default_bps_basis()).sequence;
  s.text = "Pick up the cup, then ä ünicode réplica.";
  quantize_to_float32(s);
  return s;
}

TEST(TensorFile, SerializeRoundTrip) {
  Rng rng(1);
  TensorFile f;
  const Mat m = test::random_mat(3, 4, rng);
  f.add(Tensor::from_matrix("a", m, {}, DType::kFloat64));
  f.add(Tensor::from_ints("b", {1, -2, 3}));
  f.add(Tensor::from_matrix("c", m, {3, 2, 2}, DType::kFloat32));
  const TensorFile g = TensorFile::deserialize(f.serialize());
  EXPECT_EQ(g.matrix("a", {3, 4}), m);
  EXPECT_EQ(g.get("b").integer, (std::vector<std::int64_t>{1, -2, 3}));
  EXPECT_EQ(g.get("c").dims, (std::vector<std::uint32_t>{3, 2, 2}));
  EXPECT_EQ(g.serialize(), f.serialize());
  EXPECT_EQ(code_of([&] { (void)g.matrix("a", {4, 3}); }), ErrorCode::kShapeMismatch);
  EXPECT_EQ(code_of([&] { (void)g.get("missing"); }), ErrorCode::kFormat);
}

TEST(TensorFile, CorruptInputsFailLoudly) {
  TensorFile f;
  f.add(Tensor::from_ints("x", {1, 2, 3, 4}));
  auto bytes = f.serialize();

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { TensorFile::deserialize(bad_magic); }), ErrorCode::kBadMagic);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_EQ(code_of([&] { TensorFile::deserialize(truncated); }), ErrorCode::kTruncated);

  auto version = bytes;
  version[4] = 0x7f;
  EXPECT_EQ(code_of([&] { TensorFile::deserialize(version); }), ErrorCode::kVersionMismatch);

  // Header with a zero tensor count followed by stray bytes.
  std::vector<std::uint8_t> empty(bytes.begin(), bytes.begin() + 5);
  empty.insert(empty.end(), {0, 0, 0, 0, 0xAB});
  EXPECT_EQ(code_of([&] { TensorFile::deserialize(empty); }), ErrorCode::kFormat);

  empty.pop_back();
  EXPECT_TRUE(TensorFile::deserialize(empty).tensors().empty());
}

TEST(Archive, RoundTripIsBitExact) {
  const HoiSequence s = generated();
  const auto dir = test::temp_dir("archive_rt");
  write_archive(dir, s);
  const HoiSequence r = read_archive(dir);
  EXPECT_EQ(r.id, s.id);
  EXPECT_EQ(r.text, s.text);
  EXPECT_EQ(r.fps(), s.fps());
  EXPECT_EQ(r.human.positions, s.human.positions);
  EXPECT_EQ(r.human.rotations, s.human.rotations);
  EXPECT_EQ(r.human.root, s.human.root);
  ASSERT_EQ(r.segments.size(), s.segments.size());
  for (std::size_t i = 0; i < s.segments.size(); ++i) {
    EXPECT_EQ(r.segments[i].start, s.segments[i].start);
    EXPECT_EQ(r.segments[i].end, s.segments[i].end);
    EXPECT_EQ(r.segments[i].text, s.segments[i].text);
  }
  ASSERT_EQ(r.objects.size(), s.objects.size());
  for (std::size_t o = 0; o < s.objects.size(); ++o) {
    EXPECT_EQ(r.objects[o].rotation, s.objects[o].rotation);
    EXPECT_EQ(r.objects[o].translation, s.objects[o].translation);
    EXPECT_EQ(r.objects[o].geometry.name, s.objects[o].geometry.name);
    EXPECT_EQ(r.objects[o].geometry.mesh.vertices, s.objects[o].geometry.mesh.vertices);
    EXPECT_EQ(r.objects[o].geometry.mesh.faces, s.objects[o].geometry.mesh.faces);
    EXPECT_EQ(r.objects[o].geometry.surface_samples, s.objects[o].geometry.surface_samples);
    EXPECT_EQ(r.objects[o].geometry.bps_code, s.objects[o].geometry.bps_code);
  }
  // Writing the read-back copy reproduces the same bytes.
  const auto dir2 = test::temp_dir("archive_rt2");
  write_archive(dir2, r);
  EXPECT_EQ(read_file_bytes(dir / "tensors.bin"), read_file_bytes(dir2 / "tensors.bin"));
  EXPECT_EQ(read_file_bytes(dir / "meta.json"), read_file_bytes(dir2 / "meta.json"));
}

TEST(Archive, SchemaMismatchIsRejected) {
  const auto dir = test::temp_dir("archive_schema");
  write_archive(dir, generated());
  const auto bytes = read_file_bytes(dir / "meta.json");
  auto meta = nlohmann::json::parse(std::string(bytes.begin(), bytes.end()));
  meta["schema_version"] = kArchiveSchemaVersion + 1;
  const std::string text = meta.dump();
  write_file_bytes(dir / "meta.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  EXPECT_EQ(code_of([&] { read_archive(dir); }), ErrorCode::kVersionMismatch);
}

TEST(Archive, MissingDirectoryIsIoError) {
  EXPECT_EQ(code_of([] { read_archive("/nonexistent/himo/archive"); }), ErrorCode::kIo);
}

}  // namespace
}  // namespace himo
