#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <string>

#include "himo/corpus.hpp"

namespace himo::test {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("himo_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const Mat&)>& f, Mat x, Eigen::Index i,
                                 double h = 1e-6) {
  const double x0 = x.data()[i];
  x.data()[i] = x0 + h;
  const double up = f(x);
  x.data()[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2 * h);
}

/// |a - b| / max(|a|, |b|, floor).
/// Fourth-order central stencil; round-off stays near 1e-16 / h.
inline double five_point_difference(const std::function<double(const Mat&)>& f, Mat x, Eigen::Index i,
                                    double h = 1e-3) {
  const double x0 = x.data()[i];
  double v[4];
  const double steps[4] = {2 * h, h, -h, -2 * h};
  for (int k = 0; k < 4; ++k) {
    x.data()[i] = x0 + steps[k];
    v[k] = f(x);
  }
  return (-v[0] + 8 * v[1] - 8 * v[2] + v[3]) / (12 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline CorpusConfig small_corpus_config(int n = 12, std::uint64_t seed = 7) {
  CorpusConfig c;
  c.num_sequences = n;
  c.num_objects = 2;
  c.min_frames = 40;
  c.max_frames = 60;
  c.min_segments = 2;
  c.max_segments = 2;
  c.min_segment_frames = 15;
  c.surface_samples = 128;
  c.seed = seed;
  return c;
}

/// In-memory corpus from the generator without touching disk.
inline Corpus small_corpus(int n = 12, std::uint64_t seed = 7) {
  const CorpusConfig c = small_corpus_config(n, seed);
  const ToyBodyModel body;
  const Mat& basis = default_bps_basis();
  std::vector<HoiSequence> seqs;
  CorpusManifest m;
  m.num_objects = c.num_objects;
  m.seed = seed;
  for (int i = 0; i < n; ++i) {
    seqs.push_back(generate_sequence(c, i, body, basis).sequence);
    m.ids.push_back(seqs.back().id);
  }
  m = split_dataset(m, c.ratios, seed);
  return Corpus::from_sequences(std::move(seqs), m);
}

}  // namespace himo::test
