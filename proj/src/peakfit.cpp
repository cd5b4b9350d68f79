#include "specbench/peakfit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "specbench/io.hpp"

namespace specbench {

namespace {

constexpr int kNumParams = 5;
using Jacobian = Eigen::Matrix<double, Eigen::Dynamic, kNumParams>;
using ParamVec = Eigen::Matrix<double, kNumParams, 1>;

ParamVec pack(const VoigtParams& p) { return {p.center, p.sigma, p.gamma, p.amplitude, p.offset}; }

VoigtParams unpack(const ParamVec& v) { return {v[0], v[1], v[2], v[3], v[4]}; }

// Keeps widths non-negative (not both zero) and the amplitude positive.
VoigtParams project(VoigtParams p, double min_width) {
  p.sigma = std::max(p.sigma, 0.0);
  p.gamma = std::max(p.gamma, 0.0);
  if (p.sigma + p.gamma < min_width) p.gamma = min_width;
  p.amplitude = std::max(p.amplitude, std::numeric_limits<double>::min());
  return p;
}

struct Window {
  Vector x;
  Vector y;
};

Window extract(const Spectrum& s, FitWindow w) {
  const Vector& x = s.axis();
  Eigen::Index first = 0;
  while (first < x.size() && x[first] < w.lo) ++first;
  Eigen::Index last = x.size() - 1;
  while (last >= 0 && x[last] > w.hi) --last;
  const Eigen::Index n = last - first + 1;
  if (n < 8) throw DataError("fit window [" + format_double(w.lo) + ", " + format_double(w.hi) + "] holds fewer than 8 bins");
  return {x.segment(first, n), s.intensity().segment(first, n)};
}

Vector model_values(const VoigtParams& p, const Vector& x) {
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = voigt_eval(p, x[i]);
  return out;
}

Jacobian jacobian(const VoigtParams& p, const Vector& x) {
  const auto w = pseudo_voigt_width(p.fwhm_gauss(), p.fwhm_lorentz());
  const double f = w.fwhm;
  const double ln2 = std::numbers::ln2;
  Jacobian jac(x.size(), kNumParams);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double u = (x[i] - p.center) / f;
    const double lor = 1.0 / (1.0 + 4.0 * u * u);
    const double gau = std::exp(-4.0 * ln2 * u * u);
    const double shape = w.eta * lor + (1.0 - w.eta) * gau;
    const double dshape_du = w.eta * (-8.0 * u * lor * lor) + (1.0 - w.eta) * (-8.0 * ln2 * u * gau);
    const double dm_df = p.amplitude * dshape_du * (-u / f);
    const double dm_deta = p.amplitude * (lor - gau);
    const double dm_dfg = dm_df * w.dfwhm_dg + dm_deta * w.deta_dg;
    const double dm_dfl = dm_df * w.dfwhm_dl + dm_deta * w.deta_dl;
    jac(i, 0) = p.amplitude * dshape_du * (-1.0 / f);
    jac(i, 1) = dm_dfg * kSigmaToFwhm<double>;
    jac(i, 2) = dm_dfl * 2.0;
    jac(i, 3) = shape;
    jac(i, 4) = 1.0;
  }
  return jac;
}

double rms(const Vector& r) { return std::sqrt(r.squaredNorm() / static_cast<double>(r.size())); }

}  // namespace

void VoigtParams::validate() const {
  if (!(sigma >= 0.0) || !(gamma >= 0.0)) throw DataError("voigt widths must be >= 0");
  if (!(sigma + gamma > 0.0)) throw DataError("voigt widths cannot both be 0");
  if (!(amplitude > 0.0)) throw DataError("voigt amplitude must be > 0");
}

double voigt_eval(const VoigtParams& p, double x) {
  return p.offset + pseudo_voigt(x, p.center, p.fwhm_gauss(), p.fwhm_lorentz(), p.amplitude);
}

PeakReport make_report(const VoigtParams& p, double residual_rms) {
  PeakReport r;
  r.position = p.center;
  r.fwhm = pseudo_voigt_width(p.fwhm_gauss(), p.fwhm_lorentz()).fwhm;
  r.intensity = p.amplitude;
  r.area = pseudo_voigt_area(p.fwhm_gauss(), p.fwhm_lorentz(), p.amplitude);
  r.residual_rms = residual_rms;
  return r;
}

VoigtParams initial_guess(const Spectrum& s, FitWindow window) {
  const Window w = extract(s, window);
  Eigen::Index peak = 0;
  const double hi = w.y.maxCoeff(&peak);
  const double lo = w.y.minCoeff();
  const double half = lo + 0.5 * (hi - lo);
  Eigen::Index a = peak;
  while (a > 0 && w.y[a - 1] >= half) --a;
  Eigen::Index b = peak;
  while (b + 1 < w.y.size() && w.y[b + 1] >= half) ++b;
  const double spacing = (w.x[w.x.size() - 1] - w.x[0]) / static_cast<double>(w.x.size() - 1);
  const double span = std::max(w.x[b] - w.x[a], spacing);
  VoigtParams p;
  p.center = w.x[peak];
  p.amplitude = hi > lo ? hi - lo : 1.0;
  p.sigma = 0.5 * span / kSigmaToFwhm<double>;
  p.gamma = 0.5 * span / 2.0;
  p.offset = lo;
  return p;
}

FitResult fit_peak(const Spectrum& s, FitWindow window, const VoigtParams& init, const FitOptions& options) {
  init.validate();
  const Window w = extract(s, window);
  if (init.center < w.x[0] || init.center > w.x[w.x.size() - 1])
    throw DataError("initial center " + format_double(init.center) + " lies outside the fit window");

  const double spacing = (w.x[w.x.size() - 1] - w.x[0]) / static_cast<double>(w.x.size() - 1);
  const double min_width = 1e-6 * spacing;
  const double data_scale = w.y.squaredNorm();
  const double exact_sse = 1e-28 * std::max(data_scale, 1.0);

  VoigtParams p = project(init, min_width);
  Vector r = w.y - model_values(p, w.x);
  double sse = r.squaredNorm();

  FitResult out;
  out.initial_residual_rms = rms(r);
  out.input_rms = rms((w.y.array() - w.y.mean()).matrix());

  double lambda = 1e-3;
  bool converged = sse <= exact_sse;
  int iter = 0;
  while (!converged && iter < options.max_iterations) {
    ++iter;
    const Jacobian jac = jacobian(p, w.x);
    const Eigen::Matrix<double, kNumParams, kNumParams> jtj = jac.transpose() * jac;
    const ParamVec grad = jac.transpose() * r;
    const double diag_floor = 1e-12 * std::max(jtj.diagonal().maxCoeff(), 1e-300);
    bool accepted = false;
    while (!accepted) {
      Eigen::Matrix<double, kNumParams, kNumParams> a = jtj;
      for (int k = 0; k < kNumParams; ++k) a(k, k) += lambda * std::max(jtj(k, k), diag_floor);
      const ParamVec step = a.ldlt().solve(grad);
      const VoigtParams trial = project(unpack(pack(p) + step), min_width);
      const Vector r_trial = w.y - model_values(trial, w.x);
      const double sse_trial = r_trial.squaredNorm();
      if (std::isfinite(sse_trial) && sse_trial <= sse) {
        accepted = true;
        const double drop = sse - sse_trial;
        p = trial;
        r = r_trial;
        sse = sse_trial;
        lambda = std::max(lambda / 10.0, 1e-12);
        const double step_rel = (step.array().abs() / (pack(p).array().abs() + 1e-12)).maxCoeff();
        if (drop <= options.rel_tol * sse || sse <= exact_sse || step_rel < 1e-14) converged = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) {
          // No descent direction left: p is a local minimum.
          converged = true;
          break;
        }
      }
    }
  }
  if (!converged)
    throw FitError("peak fit did not converge in " + std::to_string(options.max_iterations) + " iterations", p, rms(r));

  out.params = p;
  out.iterations = iter;
  out.report = make_report(p, rms(r));
  out.poor_fit = out.report.residual_rms >= 0.9 * out.input_rms;
  return out;
}

FitResult fit_peak(const Spectrum& s, FitWindow window, const FitOptions& options) {
  return fit_peak(s, window, initial_guess(s, window), options);
}

// ---- study ------------------------------------------------------------------

const std::vector<std::string>& study_parameter_names() {
  static const std::vector<std::string> names{"G_position",  "G_fwhm",  "G_intensity",  "G_area",
                                              "2D_position", "2D_fwhm", "2D_intensity", "2D_area"};
  return names;
}

Eigen::MatrixXd StudyTable::wide() const {
  const auto n_params = static_cast<Eigen::Index>(study_parameter_names().size());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(levels.size()), 2 * n_params);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto lvl = static_cast<Eigen::Index>(i) / n_params;
    const auto k = static_cast<Eigen::Index>(i) % n_params;
    out(lvl, 2 * k) = rows[i].mean;
    out(lvl, 2 * k + 1) = rows[i].std;
  }
  return out;
}

const StudyRow& StudyTable::at(std::size_t level_index, const std::string& param) const {
  const auto& names = study_parameter_names();
  const auto it = std::find(names.begin(), names.end(), param);
  if (it == names.end()) throw DataError("unknown study parameter '" + param + "'");
  return rows.at(level_index * names.size() + static_cast<std::size_t>(it - names.begin()));
}

StudyTable noise_sensitivity_study(const ClassProfile& p, std::span<const double> levels, int reps, std::uint64_t seed,
                                   const Vector& grid) {
  if (reps < 2) throw DataError("sensitivity study needs reps >= 2");
  Rng base_rng(derive_seed(seed, {0}));
  const Spectrum clean = synth_spectrum(p, grid, base_rng);
  const auto& names = study_parameter_names();
  const std::size_t n_params = names.size();

  StudyTable table;
  table.levels.assign(levels.begin(), levels.end());
  for (std::size_t li = 0; li < levels.size(); ++li) {
    NoiseSpec noise;
    noise.level = levels[li];
    noise.validate();
    std::vector<std::vector<double>> samples(n_params);
    std::vector<int> failures(n_params, 0);
    for (int rep = 0; rep < reps; ++rep) {
      Rng rng(derive_seed(seed, {1, li, static_cast<std::uint64_t>(rep)}));
      const Spectrum noisy = add_noise(clean, noise, rng);
      std::size_t k = 0;
      for (FitWindow window : {kGWindow, k2DWindow}) {
        try {
          const PeakReport r = fit_peak(noisy, window).report;
          for (double v : {r.position, r.fwhm, r.intensity, r.area}) samples[k++].push_back(v);
        } catch (const NumericalError&) {
          for (int q = 0; q < 4; ++q) ++failures[k++];
        }
      }
    }
    for (std::size_t k = 0; k < n_params; ++k) {
      StudyRow row;
      row.noise_level = levels[li];
      row.param_name = names[k];
      row.n_failures = failures[k];
      const auto& v = samples[k];
      if (v.empty()) {
        row.mean = row.std = std::numeric_limits<double>::quiet_NaN();
      } else {
        const Eigen::Map<const Vector> m(v.data(), static_cast<Eigen::Index>(v.size()));
        row.mean = m.mean();
        row.std = v.size() > 1 ? std::sqrt((m.array() - row.mean).square().sum() / static_cast<double>(v.size() - 1))
                               : 0.0;
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

void write_study_csv(const StudyTable& t, std::ostream& out) {
  out << "noise_level,param_name,mean,std,n_failures\n";
  for (const auto& r : t.rows)
    out << format_double(r.noise_level) << ',' << r.param_name << ',' << format_double(r.mean) << ','
        << format_double(r.std) << ',' << r.n_failures << '\n';
}

}  // namespace specbench
