#include "himo/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace himo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'H', 'I', 'M', 'O'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorCode::kTruncated, "tensors.bin: truncated blob");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

}  // namespace

std::size_t Tensor::element_count() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t b) { return a * b; });
}

Tensor Tensor::from_matrix(std::string name, const Mat& m, std::vector<std::uint32_t> dims,
                           DType dtype) {
  require(dtype != DType::kInt64, ErrorCode::kDtypeMismatch, "from_matrix: integer dtype");
  Tensor t;
  t.name = std::move(name);
  t.dtype = dtype;
  t.dims = dims.empty() ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(m.rows()),
                                                     static_cast<std::uint32_t>(m.cols())}
                        : std::move(dims);
  require(t.element_count() == static_cast<std::size_t>(m.size()), ErrorCode::kShapeMismatch,
          "from_matrix: dims do not match matrix size for " + t.name);
  t.real.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      t.real[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return t;
}

Tensor Tensor::from_ints(std::string name, const std::vector<std::int64_t>& values,
                         std::vector<std::uint32_t> dims) {
  Tensor t;
  t.name = std::move(name);
  t.dtype = DType::kInt64;
  t.dims = dims.empty() ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(values.size())}
                        : std::move(dims);
  require(t.element_count() == values.size(), ErrorCode::kShapeMismatch,
          "from_ints: dims do not match value count for " + t.name);
  t.integer = values;
  return t;
}

Mat Tensor::to_matrix() const {
  require(!dims.empty(), ErrorCode::kShapeMismatch, "to_matrix: scalar tensor " + name);
  const Eigen::Index rows = dims[0];
  const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(element_count()) / rows;
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      m(r, c) = dtype == DType::kInt64 ? static_cast<double>(integer[i]) : real[i];
    }
  return m;
}

TensorFile::TensorFile(std::vector<Tensor> tensors) {
  for (auto& t : tensors) add(std::move(t));
}

void TensorFile::add(Tensor t) {
  require(!index_.contains(t.name), ErrorCode::kFormat, "duplicate tensor name " + t.name);
  require(t.name.size() <= 0xFFFF, ErrorCode::kFormat, "tensor name too long");
  require(t.dims.size() <= 0xFF, ErrorCode::kFormat, "too many dimensions");
  const std::size_t n = t.element_count();
  require(t.dtype == DType::kInt64 ? t.integer.size() == n : t.real.size() == n,
          ErrorCode::kShapeMismatch, "tensor data size does not match dims for " + t.name);
  index_[t.name] = tensors_.size();
  tensors_.push_back(std::move(t));
}

bool TensorFile::contains(const std::string& name) const { return index_.contains(name); }

const Tensor& TensorFile::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kFormat, "missing tensor " + name);
  return tensors_[it->second];
}

Mat TensorFile::matrix(const std::string& name, const std::vector<std::uint32_t>& dims) const {
  const Tensor& t = get(name);
  if (t.dtype == DType::kInt64)
    fail(ErrorCode::kDtypeMismatch, "tensor " + name + " is int64, expected float");
  if (t.dims != dims)
    fail(ErrorCode::kShapeMismatch,
         "tensor " + name + " has shape " + dims_string(t.dims) + ", expected " + dims_string(dims));
  return t.to_matrix();
}

std::vector<std::uint8_t> TensorFile::serialize() const {
  Writer w;
  w.raw(kMagic, 4);
  w.u8(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(tensors_.size()));
  for (const Tensor& t : tensors_) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    switch (t.dtype) {
      case DType::kFloat32:
        for (double v : t.real) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        break;
      case DType::kFloat64:
        for (double v : t.real) w.u64(std::bit_cast<std::uint64_t>(v));
        break;
      case DType::kInt64:
        for (auto v : t.integer) w.u64(static_cast<std::uint64_t>(v));
        break;
    }
  }
  return w.take();
}

TensorFile TensorFile::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  if (bytes.size() < 4) fail(ErrorCode::kTruncated, "tensors.bin: truncated blob");
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail(ErrorCode::kBadMagic, "tensors.bin: bad magic");
  const auto version = static_cast<std::uint8_t>(r.get(1));
  if (version != kContainerVersion)
    fail(ErrorCode::kVersionMismatch,
         "tensors.bin: version " + std::to_string(version) + " is not supported");
  const auto count = static_cast<std::uint32_t>(r.get(4));
  if (count == 0 && r.remaining() > 0)
    fail(ErrorCode::kFormat, "tensors.bin: tensor count is 0 but payload is not empty");

  TensorFile file;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto name_len = static_cast<std::size_t>(r.get(2));
    t.name.resize(name_len);
    r.raw(t.name.data(), name_len);
    const auto dtype = static_cast<std::uint8_t>(r.get(1));
    if (dtype > 2) fail(ErrorCode::kDtypeMismatch, "tensors.bin: unknown dtype for " + t.name);
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = static_cast<std::size_t>(r.get(1));
    for (std::size_t d = 0; d < ndim; ++d) t.dims.push_back(static_cast<std::uint32_t>(r.get(4)));
    const std::size_t n = t.element_count();
    const std::size_t width = t.dtype == DType::kFloat32 ? 4 : 8;
    if (r.remaining() / width < n) fail(ErrorCode::kTruncated, "tensors.bin: truncated blob");
    if (t.dtype == DType::kInt64) {
      t.integer.resize(n);
      for (auto& v : t.integer) v = static_cast<std::int64_t>(r.get(8));
    } else {
      t.real.resize(n);
      for (auto& v : t.real)
        v = t.dtype == DType::kFloat32
                ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4))))
                : std::bit_cast<double>(r.get(8));
    }
    file.add(std::move(t));
  }
  if (r.remaining() != 0) fail(ErrorCode::kFormat, "tensors.bin: trailing bytes after last tensor");
  return file;
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "short write to " + path.string());
}

void TensorFile::write(const fs::path& path) const { write_file_bytes(path, serialize()); }

TensorFile TensorFile::read(const fs::path& path) { return deserialize(read_file_bytes(path)); }

// ---------------------------------------------------------------------------

namespace {

template <typename Derived>
void quantize(Eigen::MatrixBase<Derived>& m) {
  m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

std::uint32_t u32(Eigen::Index v) { return static_cast<std::uint32_t>(v); }

}  // namespace

void quantize_to_float32(HoiSequence& seq) {
  quantize(seq.human.positions);
  quantize(seq.human.rotations);
  quantize(seq.human.root);
  for (auto& o : seq.objects) {
    quantize(o.rotation);
    quantize(o.translation);
    quantize(o.geometry.mesh.vertices);
    quantize(o.geometry.surface_samples);
    quantize(o.geometry.bps_code);
    quantize(o.geometry.norm_center);
    o.geometry.norm_scale = static_cast<float>(o.geometry.norm_scale);
  }
}

void write_archive(const fs::path& dir, const HoiSequence& seq) {
  seq.validate();
  fs::create_directories(dir);
  json meta;
  meta["id"] = seq.id;
  meta["fps"] = seq.fps();
  meta["text"] = seq.text;
  meta["schema_version"] = kArchiveSchemaVersion;
  meta["num_joints"] = seq.human.num_joints;
  meta["segments"] = json::array();
  for (const auto& s : seq.segments)
    meta["segments"].push_back({{"start", s.start}, {"end", s.end}, {"text", s.text}});
  meta["objects"] = json::array();
  for (const auto& o : seq.objects) meta["objects"].push_back(o.geometry.name);
  {
    std::ofstream out(dir / "meta.json", std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << '\n';
  }

  const auto t = u32(seq.frames());
  const auto j = static_cast<std::uint32_t>(seq.human.num_joints);
  TensorFile file;
  file.add(Tensor::from_matrix("human.positions", seq.human.positions, {t, j, 3}));
  file.add(Tensor::from_matrix("human.rotations", seq.human.rotations, {t, j, 6}));
  file.add(Tensor::from_matrix("human.root", seq.human.root, {t, 3}));
  for (std::size_t k = 0; k < seq.objects.size(); ++k) {
    const ObjectTrack& o = seq.objects[k];
    const std::string p = "obj" + std::to_string(k) + ".";
    file.add(Tensor::from_matrix(p + "rotation", o.rotation, {t, 6}));
    file.add(Tensor::from_matrix(p + "translation", o.translation, {t, 3}));
    file.add(Tensor::from_matrix(p + "bps", o.geometry.bps_code));
    file.add(Tensor::from_matrix(p + "samples", o.geometry.surface_samples));
    file.add(Tensor::from_matrix(p + "mesh_vertices", o.geometry.mesh.vertices));
    // Eigen storage is column-major; the container is row-major.
    std::vector<std::int64_t> faces(static_cast<std::size_t>(o.geometry.mesh.faces.size()));
    for (Eigen::Index f = 0; f < o.geometry.mesh.faces.rows(); ++f)
      for (int c = 0; c < 3; ++c)
        faces[static_cast<std::size_t>(f * 3 + c)] = o.geometry.mesh.faces(f, c);
    file.add(Tensor::from_ints(p + "mesh_faces", faces, {u32(o.geometry.mesh.faces.rows()), 3}));
    Mat norm(1, 4);
    norm << o.geometry.norm_center.transpose(), o.geometry.norm_scale;
    file.add(Tensor::from_matrix(p + "norm", norm, {4}));
  }
  file.write(dir / "tensors.bin");
}

HoiSequence read_archive(const fs::path& dir) {
  json meta;
  {
    std::ifstream in(dir / "meta.json", std::ios::binary);
    if (!in) fail(ErrorCode::kIo, "cannot open " + (dir / "meta.json").string());
    try {
      in >> meta;
    } catch (const json::exception& e) {
      fail(ErrorCode::kFormat, std::string("meta.json: ") + e.what());
    }
  }
  try {
    const int version = meta.at("schema_version").get<int>();
    if (version != kArchiveSchemaVersion)
      fail(ErrorCode::kVersionMismatch,
           "meta.json: schema_version " + std::to_string(version) + " is not supported");

    const TensorFile file = TensorFile::read(dir / "tensors.bin");
    HoiSequence seq;
    seq.id = meta.at("id").get<std::string>();
    seq.text = meta.at("text").get<std::string>();
    for (const auto& s : meta.at("segments"))
      seq.segments.push_back(
          {s.at("start").get<int>(), s.at("end").get<int>(), s.at("text").get<std::string>()});

    const Tensor& pos = file.get("human.positions");
    require(pos.dims.size() == 3 && pos.dims[2] == 3, ErrorCode::kShapeMismatch,
            "human.positions must be T x J x 3");
    const auto t = pos.dims[0], j = pos.dims[1];
    seq.human.num_joints = static_cast<int>(j);
    seq.human.fps = meta.at("fps").get<double>();
    seq.human.positions = file.matrix("human.positions", {t, j, 3});
    seq.human.rotations = file.matrix("human.rotations", {t, j, 6});
    seq.human.root = file.matrix("human.root", {t, 3});

    const auto& names = meta.at("objects");
    for (std::size_t k = 0; k < names.size(); ++k) {
      const std::string p = "obj" + std::to_string(k) + ".";
      ObjectTrack o;
      o.geometry.name = names[k].get<std::string>();
      o.rotation = file.matrix(p + "rotation", {t, 6});
      o.translation = file.matrix(p + "translation", {t, 3});
      const Tensor& samples = file.get(p + "samples");
      require(samples.dims.size() == 2 && samples.dims[1] == 3, ErrorCode::kShapeMismatch,
              p + "samples must be S x 3");
      o.geometry.surface_samples = file.matrix(p + "samples", samples.dims);
      o.geometry.bps_code = file.matrix(p + "bps", samples.dims);
      if (file.contains(p + "mesh_vertices")) {
        const Tensor& verts = file.get(p + "mesh_vertices");
        o.geometry.mesh.vertices = file.matrix(p + "mesh_vertices", verts.dims);
        const Tensor& faces = file.get(p + "mesh_faces");
        require(faces.dtype == DType::kInt64, ErrorCode::kDtypeMismatch, p + "mesh_faces must be int64");
        require(faces.dims.size() == 2 && faces.dims[1] == 3, ErrorCode::kShapeMismatch,
                p + "mesh_faces must be F x 3");
        o.geometry.mesh.faces.resize(faces.dims[0], 3);
        for (std::uint32_t f = 0; f < faces.dims[0]; ++f)
          for (int c = 0; c < 3; ++c) o.geometry.mesh.faces(f, c) = faces.integer[f * 3 + c];
      }
      if (file.contains(p + "norm")) {
        const Mat norm = file.matrix(p + "norm", {4});
        o.geometry.norm_center = norm.block<3, 1>(0, 0);
        o.geometry.norm_scale = norm(3, 0);
      }
      seq.objects.push_back(std::move(o));
    }
    seq.validate();
    return seq;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("meta.json: ") + e.what());
  }
}

}  // namespace himo
