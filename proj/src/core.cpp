#include "specbench/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "specbench/seed.hpp"

namespace specbench {

namespace {

constexpr double kAxisSlack = 1e-9;

void check_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw DataError(std::string(what) + " contains non-finite values");
}

double median_of(std::vector<double>& buf) {
  const auto n = buf.size();
  auto mid = buf.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(buf.begin(), mid, buf.end());
  double m = *mid;
  if (n % 2 == 0) m = 0.5 * (m + *std::max_element(buf.begin(), mid));
  return m;
}

}  // namespace

Vector linspace(double lo, double hi, int n) {
  if (n < 2) throw DataError("linspace needs at least 2 points");
  Vector out(n);
  const double step = (hi - lo) / (n - 1);
  for (int i = 0; i < n; ++i) out[i] = lo + step * i;
  out[n - 1] = hi;
  return out;
}

Vector standard_grid() { return linspace(kStandardLo, kStandardHi, kStandardBins); }

Vector acquisition_grid() {
  const double step = (kStandardHi - kStandardLo) / (kStandardBins - 1);
  const int below = static_cast<int>(std::floor((kStandardLo - kAcquisitionLo) / step));
  const int n = kStandardBins + below;
  Vector out(n);
  for (int i = 0; i < n; ++i) out[i] = kStandardHi - step * (n - 1 - i);
  // Pin the standard segment to the exact standard grid values.
  out.tail(kStandardBins) = standard_grid();
  return out;
}

// ---- Spectrum -------------------------------------------------------------

Spectrum::Spectrum(Vector axis, Vector intensity, Meta meta)
    : axis_(std::move(axis)), intensity_(std::move(intensity)), meta_(std::move(meta)) {
  if (axis_.size() != intensity_.size())
    throw DataError("spectrum axis and intensity lengths differ");
  if (axis_.size() < 2) throw DataError("spectrum needs at least 2 bins");
  check_finite(axis_, "spectrum axis");
  check_finite(intensity_, "spectrum intensity");
  for (Eigen::Index i = 1; i < axis_.size(); ++i)
    if (!(axis_[i] > axis_[i - 1])) throw DataError("spectrum axis is not strictly increasing");
}

Spectrum Spectrum::with_intensity(Vector intensity) const { return Spectrum(axis_, std::move(intensity), meta_); }

Spectrum Spectrum::with_meta(const std::string& key, const std::string& value) const {
  Meta m = meta_;
  m[key] = value;
  return Spectrum(axis_, intensity_, std::move(m));
}

// ---- SpectraDataset -------------------------------------------------------

SpectraDataset::SpectraDataset(Vector grid, RowMatrix rows, Labels labels, std::vector<std::string> class_names,
                               Meta provenance)
    : grid_(std::move(grid)),
      rows_(std::move(rows)),
      labels_(std::move(labels)),
      class_names_(std::move(class_names)),
      provenance_(std::move(provenance)) {
  if (class_names_.size() < 2) throw DataError("dataset needs at least 2 classes");
  if (rows_.cols() != grid_.size()) throw DataError("dataset row length differs from grid length");
  if (static_cast<std::size_t>(rows_.rows()) != labels_.size())
    throw DataError("dataset has " + std::to_string(rows_.rows()) + " rows but " + std::to_string(labels_.size()) +
                    " labels");
  for (int y : labels_)
    if (y < 0 || y >= n_classes()) throw DataError("label " + std::to_string(y) + " out of range");
  for (Eigen::Index i = 1; i < grid_.size(); ++i)
    if (!(grid_[i] > grid_[i - 1])) throw DataError("dataset grid is not strictly increasing");
  if (!rows_.allFinite()) throw DataError("dataset contains non-finite intensities");
}

Spectrum SpectraDataset::spectrum(Eigen::Index row) const {
  return Spectrum(grid_, rows_.row(row).transpose(), {{"class", class_names_[labels_[row]]}});
}

std::vector<int> SpectraDataset::class_counts() const {
  std::vector<int> counts(class_names_.size(), 0);
  for (int y : labels_) ++counts[y];
  return counts;
}

SpectraDataset SpectraDataset::subset(std::span<const int> indices) const {
  RowMatrix r(static_cast<Eigen::Index>(indices.size()), n_bins());
  Labels l(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    r.row(static_cast<Eigen::Index>(i)) = rows_.row(indices[i]);
    l[i] = labels_[indices[i]];
  }
  return SpectraDataset(grid_, std::move(r), std::move(l), class_names_, provenance_);
}

SpectraDataset SpectraDataset::with_rows(RowMatrix rows) const {
  return SpectraDataset(grid_, std::move(rows), labels_, class_names_, provenance_);
}

SpectraDataset SpectraDataset::with_provenance(const std::string& key, const std::string& value) const {
  Meta m = provenance_;
  m[key] = value;
  return SpectraDataset(grid_, rows_, labels_, class_names_, std::move(m));
}

// ---- EvalReport -----------------------------------------------------------

EvalReport::EvalReport(Eigen::MatrixXi confusion, std::uint64_t seed, std::string model_name, double noise_level)
    : confusion_(std::move(confusion)),
      n_test_(confusion_.sum()),
      accuracy_(0.0),
      seed_(seed),
      model_name_(std::move(model_name)),
      noise_level_(noise_level) {
  if (confusion_.rows() != confusion_.cols()) throw DataError("confusion matrix must be square");
  if ((confusion_.array() < 0).any()) throw DataError("confusion counts must be non-negative");
  accuracy_ = n_test_ > 0 ? static_cast<double>(confusion_.trace()) / n_test_ : 0.0;
}

// ---- preprocessing --------------------------------------------------------

Spectrum crop(const Spectrum& s, double lo, double hi) {
  if (!(lo < hi)) throw RangeError("crop needs lo < hi");
  const Vector& x = s.axis();
  Eigen::Index first = 0;
  while (first < x.size() && x[first] < lo - kAxisSlack) ++first;
  Eigen::Index last = x.size() - 1;
  while (last >= 0 && x[last] > hi + kAxisSlack) --last;
  const Eigen::Index n = last - first + 1;
  if (n < 2) {
    std::ostringstream msg;
    msg << "crop range [" << lo << ", " << hi << "] does not overlap axis [" << x[0] << ", " << x[x.size() - 1]
        << "]";
    throw RangeError(msg.str());
  }
  return Spectrum(x.segment(first, n), s.intensity().segment(first, n), s.meta());
}

Spectrum resample(const Spectrum& s, const Vector& grid) {
  const Vector& x = s.axis();
  const Vector& y = s.intensity();
  const double x0 = x[0];
  const double x1 = x[x.size() - 1];
  Vector out(grid.size());
  const double* xb = x.data();
  const double* xe = x.data() + x.size();
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    double g = grid[i];
    if (g < x0 - kAxisSlack || g > x1 + kAxisSlack) throw RangeError("resample grid point outside spectrum axis");
    g = std::clamp(g, x0, x1);
    const auto j = std::clamp<Eigen::Index>(std::upper_bound(xb, xe, g) - xb - 1, 0, x.size() - 2);
    const double t = (g - x[j]) / (x[j + 1] - x[j]);
    out[i] = t == 1.0 ? y[j + 1] : y[j] + t * (y[j + 1] - y[j]);
  }
  return Spectrum(grid, std::move(out), s.meta());
}

Spectrum rescale01(const Spectrum& s) {
  bool constant = false;
  Vector v = rescale01_values(s.intensity(), &constant);
  Spectrum out = s.with_intensity(std::move(v));
  if (constant) return out.with_meta(kWarningKey, "constant spectrum rescaled to zeros");
  return out;
}

Vector hampel_values(const Vector& v, int window, double k, int* n_replaced) {
  if (window < 3 || window % 2 == 0) throw DataError("hampel window must be odd and >= 3");
  constexpr double kMadToSigma = 1.4826;
  const Eigen::Index n = v.size();
  const Eigen::Index half = window / 2;
  const double scale = v.cwiseAbs().maxCoeff();
  const double floor = 1e-12 * std::max(scale, 1.0);
  Vector out = v;
  int replaced = 0;
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(window));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index a = std::max<Eigen::Index>(0, i - half);
    const Eigen::Index b = std::min<Eigen::Index>(n - 1, i + half);
    buf.assign(v.data() + a, v.data() + b + 1);
    const double med = median_of(buf);
    for (auto& e : buf) e = std::abs(e - med);
    const double sigma = kMadToSigma * median_of(buf);
    const double dev = std::abs(v[i] - med);
    if (dev > k * sigma && dev > floor) {
      out[i] = med;
      ++replaced;
    }
  }
  if (n_replaced != nullptr) *n_replaced = replaced;
  return out;
}

Spectrum remove_cosmic_rays(const Spectrum& s, int window, double k) {
  int replaced = 0;
  Vector v = hampel_values(s.intensity(), window, k, &replaced);
  Spectrum out = s.with_intensity(std::move(v));
  if (replaced > 0) return out.with_meta("cosmic_rays_removed", std::to_string(replaced));
  return out;
}

SpectraDataset prepare_standard(const SpectraDataset& d, bool despike) {
  const Vector grid = standard_grid();
  RowMatrix rows(d.n_spectra(), grid.size());
  for (Eigen::Index i = 0; i < d.n_spectra(); ++i) {
    Spectrum s(d.grid(), d.rows().row(i).transpose());
    if (despike) s = remove_cosmic_rays(s);
    s = crop(s, kStandardLo, kStandardHi);
    s = resample(s, grid);
    s = rescale01(s);
    rows.row(i) = s.intensity().transpose();
  }
  return SpectraDataset(grid, std::move(rows), d.labels(), d.class_names(), d.provenance())
      .with_provenance("prepared", despike ? "despike,crop,resample,rescale01" : "crop,resample,rescale01");
}

// ---- splitting ------------------------------------------------------------

bool is_standard_grid(const Vector& grid) {
  return grid.size() == kStandardBins && (grid - standard_grid()).cwiseAbs().maxCoeff() <= 1e-6;
}

SpectraDataset ensure_standard(const SpectraDataset& d) {
  return is_standard_grid(d.grid()) ? d : prepare_standard(d);
}

std::vector<double> parse_split(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, '/')) {
    try {
      parts.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw DataError("bad split '" + text + "'");
    }
  }
  const double total = std::accumulate(parts.begin(), parts.end(), 0.0);
  if ((parts.size() != 2 && parts.size() != 3) || total <= 0.0) throw DataError("bad split '" + text + "'");
  for (auto& p : parts) p /= total;
  return parts;
}

SplitIndices stratified_split(const Labels& labels, int n_classes, std::span<const double> fractions,
                              std::uint64_t seed, const std::vector<std::string>& class_names) {
  const std::size_t parts = fractions.size();
  if (parts != 2 && parts != 3) throw DataError("split needs 2 or 3 fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw DataError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DataError("split fractions must sum to 1");

  std::vector<std::vector<int>> members(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) members.at(static_cast<std::size_t>(labels[i])).push_back(static_cast<int>(i));

  std::vector<std::vector<int>> out(parts);
  for (int c = 0; c < n_classes; ++c) {
    auto& rows = members[static_cast<std::size_t>(c)];
    const int n = static_cast<int>(rows.size());
    if (n == 0) continue;
    if (static_cast<std::size_t>(n) < parts) {
      const std::string name = c < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(c)]
                                                                         : std::to_string(c);
      throw DataError("class '" + name + "' has " + std::to_string(n) + " rows, fewer than " +
                      std::to_string(parts) + " split parts");
    }
    // Largest-remainder apportionment; ties go to the lower part index.
    std::vector<int> take(parts);
    std::vector<std::pair<double, std::size_t>> rema;
    int assigned = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      const double quota = n * fractions[p];
      take[p] = static_cast<int>(std::floor(quota));
      assigned += take[p];
      rema.emplace_back(quota - take[p], p);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int r = 0; r < n - assigned; ++r) ++take[rema[static_cast<std::size_t>(r)].second];
    // Every part gets at least one row of every class.
    for (std::size_t p = 0; p < parts; ++p) {
      if (take[p] == 0) {
        auto donor = std::max_element(take.begin(), take.end());
        --*donor;
        take[p] = 1;
      }
    }
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    std::shuffle(rows.begin(), rows.end(), rng);
    int pos = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      out[p].insert(out[p].end(), rows.begin() + pos, rows.begin() + pos + take[p]);
      pos += take[p];
    }
  }
  for (auto& part : out) std::sort(part.begin(), part.end());
  SplitIndices split;
  split.train = std::move(out[0]);
  if (parts == 3) {
    split.val = std::move(out[1]);
    split.test = std::move(out[2]);
  } else {
    split.test = std::move(out[1]);
  }
  return split;
}

SplitIndices stratified_split(const SpectraDataset& d, std::span<const double> fractions, std::uint64_t seed) {
  return stratified_split(d.labels(), d.n_classes(), fractions, seed, d.class_names());
}

EvalReport evaluate(const Labels& pred, const Labels& truth, int n_classes, std::uint64_t seed, std::string model_name,
                    double noise_level) {
  if (pred.size() != truth.size())
    throw DataError("prediction length " + std::to_string(pred.size()) + " differs from truth length " +
                    std::to_string(truth.size()));
  if (n_classes < 1) throw DataError("class count must be positive");
  Eigen::MatrixXi confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || truth[i] < 0 || truth[i] >= n_classes)
      throw DataError("label out of range in evaluate");
    ++confusion(truth[i], pred[i]);
  }
  return EvalReport(std::move(confusion), seed, std::move(model_name), noise_level);
}

}  // namespace specbench
