#include "himo/motion_repr.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace himo {

namespace {

constexpr double kDegenerateNorm = 1e-9;
constexpr double kStableEps = 1e-12;

struct GramSchmidt {
  Vec3 a1, a2, b1, b2, b3, u;
  double n1 = 0.0, nu = 0.0;
};

GramSchmidt gram_schmidt(const Rot6d& r, double eps) {
  GramSchmidt gs;
  gs.a1 = r.head<3>();
  gs.a2 = r.tail<3>();
  gs.n1 = std::sqrt(gs.a1.squaredNorm() + eps * eps);
  gs.b1 = gs.a1 / gs.n1;
  gs.u = gs.a2 - gs.b1.dot(gs.a2) * gs.b1;
  gs.nu = std::sqrt(gs.u.squaredNorm() + eps * eps);
  gs.b2 = gs.u / gs.nu;
  gs.b3 = gs.b1.cross(gs.b2);
  return gs;
}

Mat3 columns(const GramSchmidt& gs) {
  Mat3 m;
  m.col(0) = gs.b1;
  m.col(1) = gs.b2;
  m.col(2) = gs.b3;
  return m;
}

}  // namespace

Mat3 rot6d_to_matrix(const Rot6d& r) {
  require(r.allFinite(), ErrorCode::kInvalidArgument, "rot6d: non-finite input");
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (n1 <= kDegenerateNorm) fail(ErrorCode::kDegenerateRotation, "rot6d: first column is near zero");
  const Vec3 b1 = a1 / n1;
  const Vec3 u = a2 - b1.dot(a2) * b1;
  const double nu = u.norm();
  if (nu <= kDegenerateNorm * std::max(1.0, a2.norm()))
    fail(ErrorCode::kDegenerateRotation, "rot6d: columns are parallel or second column is zero");
  Mat3 m;
  m.col(0) = b1;
  m.col(1) = u / nu;
  m.col(2) = b1.cross(m.col(1));
  return m;
}

Mat3 rot6d_to_matrix_stable(const Rot6d& r) { return columns(gram_schmidt(r, kStableEps)); }

Rot6d rot6d_to_matrix_vjp(const Rot6d& r, const Mat3& grad) {
  const GramSchmidt gs = gram_schmidt(r, kStableEps);
  const Vec3 g3 = grad.col(2);
  Vec3 g1 = grad.col(0) + gs.b2.cross(g3);
  const Vec3 g2 = grad.col(1) + g3.cross(gs.b1);

  const Vec3 gu = (g2 - gs.b2 * gs.b2.dot(g2)) / gs.nu;
  const Vec3 ga2 = gu - gs.b1 * gs.b1.dot(gu);
  g1 -= gs.b1.dot(gs.a2) * gu + gs.b1.dot(gu) * gs.a2;
  const Vec3 ga1 = (g1 - gs.b1 * gs.b1.dot(g1)) / gs.n1;

  Rot6d out;
  out.head<3>() = ga1;
  out.tail<3>() = ga2;
  return out;
}

Rot6d matrix_to_rot6d(const Mat3& m) {
  require(m.allFinite(), ErrorCode::kInvalidArgument, "matrix_to_rot6d: non-finite input");
  const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-4 || std::abs(m.determinant() - 1.0) > 1e-4)
    fail(ErrorCode::kNotOrthonormal, "matrix_to_rot6d: input is not a rotation matrix");
  Rot6d r;
  r.head<3>() = m.col(0);
  r.tail<3>() = m.col(1);
  return r;
}

Rot6d project_rot6d(const Rot6d& r) {
  const Mat3 m = rot6d_to_matrix(r);
  Rot6d out;
  out.head<3>() = m.col(0);
  out.tail<3>() = m.col(1);
  return out;
}

Rot6d identity_rot6d() {
  Rot6d r;
  r << 1, 0, 0, 0, 1, 0;
  return r;
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

Mat3 axis_angle_to_matrix(const Vec3& aa) {
  const double theta = aa.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(aa);
  return Eigen::AngleAxisd(theta, aa / theta).toRotationMatrix();
}

Vec3 matrix_to_axis_angle(const Mat3& m) {
  const Eigen::AngleAxisd aa(m);
  return canonical_axis_angle(aa.angle() * aa.axis());
}

Vec3 canonical_axis_angle(const Vec3& aa) {
  const double theta = aa.norm();
  if (theta < std::numbers::pi) return aa;
  const Vec3 axis = aa / theta;
  double wrapped = std::fmod(theta, 2.0 * std::numbers::pi);
  if (wrapped > std::numbers::pi) return -(2.0 * std::numbers::pi - wrapped) * axis;
  return wrapped * axis;
}

std::array<Mat3, 3> axis_angle_derivatives(const Vec3& aa) {
  std::array<Mat3, 3> out;
  const double theta2 = aa.squaredNorm();
  if (theta2 < 1e-16) {
    for (int k = 0; k < 3; ++k) out[k] = skew(Vec3::Unit(k));
    return out;
  }
  const Mat3 r = axis_angle_to_matrix(aa);
  const Mat3 i_minus_r = Mat3::Identity() - r;
  const Mat3 s = skew(aa);
  for (int k = 0; k < 3; ++k) {
    const Vec3 w = aa.cross(i_minus_r.col(k));
    out[k] = ((aa[k] * s + skew(w)) / theta2) * r;
  }
  return out;
}

// ---------------------------------------------------------------------------

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double rad = std::sqrt(-2.0 * std::log(u1));
  spare_ = rad * std::sin(2.0 * std::numbers::pi * u2);
  has_spare_ = true;
  return rad * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Mat3 random_rotation(Rng& rng) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  while (axis.norm() < 1e-6) axis = Vec3(rng.normal(), rng.normal(), rng.normal());
  const double angle = rng.uniform(0.0, std::numbers::pi);
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

// ---------------------------------------------------------------------------

Mesh make_box(const Vec3& size) {
  Mesh mesh;
  const Vec3 h = 0.5 * size;
  mesh.vertices.resize(8, 3);
  for (int i = 0; i < 8; ++i) {
    mesh.vertices.row(i) << ((i & 1) ? h.x() : -h.x()), ((i & 2) ? h.y() : -h.y()),
        ((i & 4) ? h.z() : -h.z());
  }
  mesh.faces.resize(12, 3);
  // Outward-facing quads split into two triangles each.
  const int quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4},
                           {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
  for (int q = 0; q < 6; ++q) {
    mesh.faces.row(2 * q) << quads[q][0], quads[q][1], quads[q][2];
    mesh.faces.row(2 * q + 1) << quads[q][0], quads[q][2], quads[q][3];
  }
  return mesh;
}

Mesh make_cylinder(double radius, double height, int slices) {
  require(slices >= 3, ErrorCode::kInvalidArgument, "make_cylinder: slices < 3");
  Mesh mesh;
  mesh.vertices.resize(2 * slices + 2, 3);
  for (int i = 0; i < slices; ++i) {
    const double a = 2.0 * std::numbers::pi * i / slices;
    mesh.vertices.row(i) << radius * std::cos(a), -0.5 * height, radius * std::sin(a);
    mesh.vertices.row(slices + i) << radius * std::cos(a), 0.5 * height, radius * std::sin(a);
  }
  const int bottom = 2 * slices, top = 2 * slices + 1;
  mesh.vertices.row(bottom) << 0, -0.5 * height, 0;
  mesh.vertices.row(top) << 0, 0.5 * height, 0;
  mesh.faces.resize(4 * slices, 3);
  for (int i = 0; i < slices; ++i) {
    const int j = (i + 1) % slices;
    mesh.faces.row(4 * i) << i, slices + i, slices + j;
    mesh.faces.row(4 * i + 1) << i, slices + j, j;
    mesh.faces.row(4 * i + 2) << bottom, i, j;
    mesh.faces.row(4 * i + 3) << top, slices + j, slices + i;
  }
  return mesh;
}

Mesh make_sphere(double radius, int stacks, int slices) {
  require(stacks >= 2 && slices >= 3, ErrorCode::kInvalidArgument, "make_sphere: too coarse");
  Mesh mesh;
  const int ring_count = stacks - 1;
  mesh.vertices.resize(ring_count * slices + 2, 3);
  for (int s = 1; s < stacks; ++s) {
    const double phi = std::numbers::pi * s / stacks;
    for (int i = 0; i < slices; ++i) {
      const double a = 2.0 * std::numbers::pi * i / slices;
      mesh.vertices.row((s - 1) * slices + i) << radius * std::sin(phi) * std::cos(a),
          radius * std::cos(phi), radius * std::sin(phi) * std::sin(a);
    }
  }
  const int north = ring_count * slices, south = north + 1;
  mesh.vertices.row(north) << 0, radius, 0;
  mesh.vertices.row(south) << 0, -radius, 0;
  std::vector<std::array<std::int64_t, 3>> tris;
  for (int i = 0; i < slices; ++i) {
    const int j = (i + 1) % slices;
    tris.push_back({north, j, i});
    tris.push_back({south, (ring_count - 1) * slices + i, (ring_count - 1) * slices + j});
  }
  for (int s = 0; s + 1 < ring_count; ++s) {
    for (int i = 0; i < slices; ++i) {
      const int j = (i + 1) % slices;
      const int a = s * slices + i, b = s * slices + j;
      const int c = (s + 1) * slices + i, d = (s + 1) * slices + j;
      tris.push_back({a, b, d});
      tris.push_back({a, d, c});
    }
  }
  mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
  for (std::size_t f = 0; f < tris.size(); ++f)
    mesh.faces.row(static_cast<Eigen::Index>(f)) << tris[f][0], tris[f][1], tris[f][2];
  return mesh;
}

SurfaceSamples sample_surface(const Mesh& mesh, int count, std::uint64_t seed) {
  require(count >= 0, ErrorCode::kInvalidArgument, "sample_surface: negative count");
  require(mesh.faces.rows() >= 1 && mesh.faces.cols() == 3, ErrorCode::kDegenerateGeometry,
          "sample_surface: mesh has no faces");
  const auto nf = mesh.faces.rows();
  std::vector<double> cumulative(static_cast<std::size_t>(nf));
  double total = 0.0;
  for (Eigen::Index f = 0; f < nf; ++f) {
    for (int c = 0; c < 3; ++c)
      require(mesh.faces(f, c) >= 0 && mesh.faces(f, c) < mesh.vertices.rows(),
              ErrorCode::kDegenerateGeometry, "sample_surface: face index out of range");
    const Vec3 a = mesh.vertices.row(mesh.faces(f, 0)).transpose();
    const Vec3 b = mesh.vertices.row(mesh.faces(f, 1)).transpose();
    const Vec3 c = mesh.vertices.row(mesh.faces(f, 2)).transpose();
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative[static_cast<std::size_t>(f)] = total;
  }
  require(total > 1e-15, ErrorCode::kDegenerateGeometry, "sample_surface: mesh has zero area");

  Rng rng(seed);
  SurfaceSamples out;
  out.points.resize(count, 3);
  out.barycentric.resize(count, 3);
  out.faces.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double pick = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto f = static_cast<Eigen::Index>(it - cumulative.begin());
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    const Vec3 w(1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    Vec3 p = Vec3::Zero();
    for (int c = 0; c < 3; ++c) p += w[c] * mesh.vertices.row(mesh.faces(f, c)).transpose();
    out.points.row(i) = p.transpose();
    out.barycentric.row(i) = w.transpose();
    out.faces[static_cast<std::size_t>(i)] = static_cast<int>(f);
  }
  return out;
}

Mat make_bps_basis(int count, std::uint64_t seed) {
  Rng rng(seed);
  Mat basis(count, 3);
  for (int i = 0; i < count; ++i) {
    Vec3 p;
    do {
      p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    } while (p.squaredNorm() > 1.0);
    basis.row(i) = p.transpose();
  }
  return basis;
}

const Mat& default_bps_basis() {
  static const Mat basis = make_bps_basis(kDefaultBasisPoints, kDefaultBasisSeed);
  return basis;
}

Mat bps_encode(const Mat& samples, const Mat& basis) {
  require(samples.rows() >= 1 && basis.rows() >= 1 && samples.cols() == 3 && basis.cols() == 3,
          ErrorCode::kShapeMismatch, "bps_encode: expected non-empty S x 3 and B x 3 inputs");
  require(samples.allFinite() && basis.allFinite(), ErrorCode::kInvalidArgument,
          "bps_encode: non-finite input");
  Mat code(samples.rows(), 3);
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    Eigen::Index best = 0;
    double best_d = (samples.row(i) - basis.row(0)).squaredNorm();
    for (Eigen::Index j = 1; j < basis.rows(); ++j) {
      const double d = (samples.row(i) - basis.row(j)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    code.row(i) = samples.row(i) - basis.row(best);
  }
  return code;
}

namespace {

void encode_geometry(ObjectGeometry& g, const Mat& basis) {
  g.norm_center = g.surface_samples.colwise().mean().transpose();
  double radius = 0.0;
  for (Eigen::Index i = 0; i < g.surface_samples.rows(); ++i)
    radius = std::max(radius, (g.surface_samples.row(i).transpose() - g.norm_center).norm());
  require(radius > 1e-12, ErrorCode::kDegenerateGeometry, "object geometry has zero extent");
  g.norm_scale = 1.0 / radius;
  const Mat normalized =
      (g.surface_samples.rowwise() - g.norm_center.transpose()) * g.norm_scale;
  g.bps_code = bps_encode(normalized, basis);
}

}  // namespace

ObjectGeometry make_object_geometry(std::string name, Mesh mesh, int samples,
                                    std::uint64_t seed, const Mat& basis) {
  ObjectGeometry g;
  g.name = std::move(name);
  g.surface_samples = sample_surface_points(mesh, samples, seed);
  g.mesh = std::move(mesh);
  encode_geometry(g, basis);
  return g;
}

ObjectGeometry rotate_geometry(const ObjectGeometry& geometry, const Mat3& rotation,
                               const Mat& basis) {
  ObjectGeometry g = geometry;
  g.mesh.vertices = geometry.mesh.vertices * rotation.transpose();
  g.surface_samples = geometry.surface_samples * rotation.transpose();
  encode_geometry(g, basis);
  return g;
}

// ---------------------------------------------------------------------------

Mat HumanMotion::flatten() const {
  const int t = frames();
  Mat out(t, feature_width());
  out.leftCols(3 * num_joints) = positions;
  out.middleCols(3 * num_joints, 6 * num_joints) = rotations;
  out.rightCols(3) = root;
  return out;
}

HumanMotion HumanMotion::unflatten(const Mat& features, int num_joints, double fps) {
  require(features.cols() == human_feature_width(num_joints), ErrorCode::kShapeMismatch,
          "HumanMotion::unflatten: width does not match joint count");
  HumanMotion m;
  m.num_joints = num_joints;
  m.fps = fps;
  m.positions = features.leftCols(3 * num_joints);
  m.rotations = features.middleCols(3 * num_joints, 6 * num_joints);
  m.root = features.rightCols(3);
  return m;
}

HumanMotion HumanMotion::slice(int start, int count) const {
  require(start >= 0 && count >= 1 && start + count <= frames(), ErrorCode::kOutOfRange,
          "HumanMotion::slice: range out of bounds");
  HumanMotion m;
  m.num_joints = num_joints;
  m.fps = fps;
  m.positions = positions.middleRows(start, count);
  m.rotations = rotations.middleRows(start, count);
  m.root = root.middleRows(start, count);
  return m;
}

void HumanMotion::validate() const {
  require(num_joints >= 1 && frames() >= 1, ErrorCode::kShapeMismatch, "HumanMotion: empty");
  require(positions.cols() == 3 * num_joints && rotations.cols() == 6 * num_joints &&
              root.cols() == 3 && rotations.rows() == frames() && root.rows() == frames(),
          ErrorCode::kShapeMismatch, "HumanMotion: inconsistent shapes");
  require(positions.allFinite() && rotations.allFinite() && root.allFinite(),
          ErrorCode::kNumerical, "HumanMotion: non-finite values");
}

Mat ObjectTrack::flatten() const {
  Mat out(frames(), kObjectFeatureWidth);
  out.leftCols(6) = rotation;
  out.rightCols(3) = translation;
  return out;
}

Mat ObjectTrack::world_samples(int t) const {
  const Mat3 r = rot6d_to_matrix_stable(rotation.row(t).transpose());
  return (geometry.surface_samples * r.transpose()).rowwise() + translation.row(t);
}

ObjectTrack ObjectTrack::slice(int start, int count) const {
  require(start >= 0 && count >= 1 && start + count <= frames(), ErrorCode::kOutOfRange,
          "ObjectTrack::slice: range out of bounds");
  ObjectTrack o;
  o.rotation = rotation.middleRows(start, count);
  o.translation = translation.middleRows(start, count);
  o.geometry = geometry;
  return o;
}

void ObjectTrack::validate() const {
  require(rotation.cols() == 6 && translation.cols() == 3 && rotation.rows() == translation.rows() &&
              rotation.rows() >= 1,
          ErrorCode::kShapeMismatch, "ObjectTrack: inconsistent shapes");
  require(rotation.allFinite() && translation.allFinite(), ErrorCode::kNumerical,
          "ObjectTrack: non-finite values");
}

ObjectTrack rebase_track(const ObjectTrack& track, int frame, const Mat& basis) {
  require(frame >= 0 && frame < track.frames(), ErrorCode::kOutOfRange, "rebase_track: bad frame");
  const Mat3 base = rot6d_to_matrix_stable(track.rotation.row(frame).transpose());
  ObjectTrack out;
  out.translation = track.translation;
  out.rotation.resize(track.frames(), 6);
  for (int t = 0; t < track.frames(); ++t) {
    const Mat3 r = rot6d_to_matrix_stable(track.rotation.row(t).transpose()) * base.transpose();
    out.rotation.row(t) << r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1);
  }
  out.rotation.row(frame) = identity_rot6d().transpose();
  out.geometry = rotate_geometry(track.geometry, base, basis);
  return out;
}

bool segments_tile(const std::vector<Segment>& segments, int frames) {
  if (segments.empty()) return false;
  int cursor = 0;
  for (const auto& s : segments) {
    if (s.start != cursor || s.end <= s.start) return false;
    cursor = s.end;
  }
  return cursor == frames;
}

void HoiSequence::validate() const {
  human.validate();
  for (const auto& o : objects) {
    o.validate();
    require(o.frames() == human.frames(), ErrorCode::kShapeMismatch,
            "HoiSequence: object track length differs from human motion");
  }
  require(segments_tile(segments, frames()), ErrorCode::kInvalidArgument,
          "HoiSequence: segments do not tile the sequence");
}

}  // namespace himo

namespace himo {

namespace {

void check_width(const Mat& f, Eigen::Index width, const char* who) {
  require(f.cols() == width, ErrorCode::kShapeMismatch,
          std::string(who) + ": feature width differs from statistics");
}

}  // namespace

Mat NormStats::normalize_human(const Mat& f) const {
  check_width(f, human_mean.size(), "normalize_human");
  return (f.rowwise() - human_mean.transpose()).array().rowwise() / human_std.transpose().array();
}

Mat NormStats::denormalize_human(const Mat& f) const {
  check_width(f, human_mean.size(), "denormalize_human");
  Mat out = f.array().rowwise() * human_std.transpose().array();
  out.rowwise() += human_mean.transpose();
  return out;
}

Mat NormStats::normalize_objects(const Mat& f) const {
  require(f.cols() % kObjectFeatureWidth == 0, ErrorCode::kShapeMismatch,
          "normalize_objects: width is not a multiple of 9");
  Mat out(f.rows(), f.cols());
  for (Eigen::Index o = 0; o < f.cols() / kObjectFeatureWidth; ++o)
    out.middleCols(o * kObjectFeatureWidth, kObjectFeatureWidth) =
        (f.middleCols(o * kObjectFeatureWidth, kObjectFeatureWidth).rowwise() -
         object_mean.transpose())
            .array()
            .rowwise() /
        object_std.transpose().array();
  return out;
}

Mat NormStats::denormalize_objects(const Mat& f) const {
  require(f.cols() % kObjectFeatureWidth == 0, ErrorCode::kShapeMismatch,
          "denormalize_objects: width is not a multiple of 9");
  Mat out(f.rows(), f.cols());
  for (Eigen::Index o = 0; o < f.cols() / kObjectFeatureWidth; ++o) {
    auto block = out.middleCols(o * kObjectFeatureWidth, kObjectFeatureWidth);
    block = f.middleCols(o * kObjectFeatureWidth, kObjectFeatureWidth).array().rowwise() *
            object_std.transpose().array();
    block.rowwise() += object_mean.transpose();
  }
  return out;
}

Vec NormStats::object_std_packed(int num_objects) const {
  Vec s(num_objects * kObjectFeatureWidth);
  for (int o = 0; o < num_objects; ++o) s.segment(o * kObjectFeatureWidth, kObjectFeatureWidth) = object_std;
  return s;
}

}  // namespace himo
