#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "specbench/errors.hpp"

namespace specbench {

using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Meta = std::map<std::string, std::string>;
using Labels = std::vector<int>;

/// Lower/upper edge and length of the standard analysis grid.
inline constexpr double kStandardLo = 1450.0;
inline constexpr double kStandardHi = 3152.4;
inline constexpr int kStandardBins = 728;
/// Full acquisition window of the instrument.
inline constexpr double kAcquisitionLo = 662.05;
inline constexpr double kAcquisitionHi = 3152.4;

/// Meta key set when rescale01 meets a constant spectrum.
inline constexpr const char* kWarningKey = "warning";

/// `n` evenly spaced points on [lo, hi], endpoints exact.
Vector linspace(double lo, double hi, int n);

/// The uniform 728-point grid over [1450, 3152.4] cm^-1.
Vector standard_grid();

/// Raw acquisition grid: the standard spacing extended down to 662.05 cm^-1,
/// anchored at 3152.4 so that cropping to [1450, 3152.4] yields the
/// standard grid.
Vector acquisition_grid();

/// An intensity trace on a strictly increasing wavenumber axis.
class Spectrum {
 public:
  Spectrum(Vector axis, Vector intensity, Meta meta = {});

  const Vector& axis() const noexcept { return axis_; }
  const Vector& intensity() const noexcept { return intensity_; }
  const Meta& meta() const noexcept { return meta_; }
  Eigen::Index size() const noexcept { return axis_.size(); }

  Spectrum with_intensity(Vector intensity) const;
  Spectrum with_meta(const std::string& key, const std::string& value) const;

 private:
  Vector axis_;
  Vector intensity_;
  Meta meta_;
};

/// Labeled matrix of spectra sharing one grid. Rows are spectra.
class SpectraDataset {
 public:
  SpectraDataset(Vector grid, RowMatrix rows, Labels labels, std::vector<std::string> class_names,
                 Meta provenance = {});

  const Vector& grid() const noexcept { return grid_; }
  const RowMatrix& rows() const noexcept { return rows_; }
  const Labels& labels() const noexcept { return labels_; }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  const Meta& provenance() const noexcept { return provenance_; }

  Eigen::Index n_spectra() const noexcept { return rows_.rows(); }
  Eigen::Index n_bins() const noexcept { return rows_.cols(); }
  int n_classes() const noexcept { return static_cast<int>(class_names_.size()); }

  Spectrum spectrum(Eigen::Index row) const;
  std::vector<int> class_counts() const;
  SpectraDataset subset(std::span<const int> indices) const;
  SpectraDataset with_rows(RowMatrix rows) const;
  SpectraDataset with_provenance(const std::string& key, const std::string& value) const;

 private:
  Vector grid_;
  RowMatrix rows_;
  Labels labels_;
  std::vector<std::string> class_names_;
  Meta provenance_;
};

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

/// Accuracy and confusion counts (rows = true class, cols = predicted).
class EvalReport {
 public:
  EvalReport(Eigen::MatrixXi confusion, std::uint64_t seed = 0, std::string model_name = {},
             double noise_level = 0.0);

  double accuracy() const noexcept { return accuracy_; }
  const Eigen::MatrixXi& confusion() const noexcept { return confusion_; }
  int n_test() const noexcept { return n_test_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& model_name() const noexcept { return model_name_; }
  double noise_level() const noexcept { return noise_level_; }

 private:
  Eigen::MatrixXi confusion_;
  int n_test_;
  double accuracy_;
  std::uint64_t seed_;
  std::string model_name_;
  double noise_level_;
};

// ---- preprocessing -------------------------------------------------------

/// Keeps the bins with lo <= axis <= hi (1e-9 cm^-1 slack for grid rounding).
Spectrum crop(const Spectrum& s, double lo, double hi);

/// Linear interpolation onto `grid`, which must lie inside the axis hull.
Spectrum resample(const Spectrum& s, const Vector& grid);

/// Affine map of intensities onto [0, 1]. Constant input maps to zeros and
/// sets meta["warning"].
Spectrum rescale01(const Spectrum& s);

/// Hampel filter: bins deviating from the sliding-window median by more
/// than k robust standard deviations (1.4826 * MAD) are replaced by that
/// median.
Spectrum remove_cosmic_rays(const Spectrum& s, int window = 7, double k = 5.0);

/// Crop, resample to the standard grid, despike, rescale. Applied to every
/// row; output always has 728 bins.
SpectraDataset prepare_standard(const SpectraDataset& d, bool despike = true);

/// True for a 728-point grid matching standard_grid() within 1e-6 cm^-1.
bool is_standard_grid(const Vector& grid);
/// `d` unchanged when it is already on the standard grid, else prepare_standard(d).
SpectraDataset ensure_standard(const SpectraDataset& d);

/// Vector-level kernels behind the Spectrum operations.
template <typename Derived>
Vector rescale01_values(const Eigen::MatrixBase<Derived>& v, bool* constant = nullptr) {
  const double lo = v.minCoeff();
  const double hi = v.maxCoeff();
  if (!(hi > lo)) {
    if (constant != nullptr) *constant = true;
    return Vector::Zero(v.size());
  }
  if (constant != nullptr) *constant = false;
  return ((v.array() - lo) / (hi - lo)).matrix();
}

Vector hampel_values(const Vector& v, int window, double k, int* n_replaced = nullptr);

// ---- splitting and evaluation -------------------------------------------

/// Per-class largest-remainder split. `fractions` has 2 (train/test) or 3
/// (train/val/test) entries summing to 1.
SplitIndices stratified_split(const SpectraDataset& d, std::span<const double> fractions,
                              std::uint64_t seed);
SplitIndices stratified_split(const Labels& labels, int n_classes, std::span<const double> fractions,
                              std::uint64_t seed, const std::vector<std::string>& class_names = {});

EvalReport evaluate(const Labels& pred, const Labels& truth, int n_classes, std::uint64_t seed = 0,
                    std::string model_name = {}, double noise_level = 0.0);

/// Parses "80/20" or "60/20/20" into fractions.
std::vector<double> parse_split(const std::string& text);

}  // namespace specbench
