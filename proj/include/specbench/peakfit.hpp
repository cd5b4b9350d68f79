#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "specbench/core.hpp"
#include "specbench/lineshape.hpp"
#include "specbench/spectragen.hpp"

namespace specbench {

/// Single pseudo-Voigt band on a constant baseline. `sigma` is the Gaussian
/// standard deviation, `gamma` the Lorentzian half width at half maximum.
struct VoigtParams {
  double center = 0.0;
  double sigma = 0.0;
  double gamma = 0.0;
  double amplitude = 1.0;
  double offset = 0.0;

  void validate() const;
  double fwhm_gauss() const { return kSigmaToFwhm<double> * sigma; }
  double fwhm_lorentz() const { return 2.0 * gamma; }
};

struct PeakReport {
  double position = 0.0;
  double fwhm = 0.0;
  double intensity = 0.0;
  double area = 0.0;
  double residual_rms = 0.0;
};

struct FitWindow {
  double lo = 0.0;
  double hi = 0.0;
};

inline constexpr FitWindow kGWindow{1500.0, 1700.0};
inline constexpr FitWindow k2DWindow{2550.0, 2850.0};

struct FitOptions {
  int max_iterations = 200;
  double rel_tol = 1e-10;
};

struct FitResult {
  VoigtParams params;
  PeakReport report;
  int iterations = 0;
  double initial_residual_rms = 0.0;
  // RMS of the window data about its mean: what a flat line leaves.
  double input_rms = 0.0;
  // residual_rms >= 0.9 * input_rms: the band explains almost nothing.
  bool poor_fit = false;
};

/// Raised when Levenberg-Marquardt exhausts its iteration budget.
class FitError : public NumericalError {
 public:
  FitError(const std::string& what, VoigtParams best, double residual_rms)
      : NumericalError(what), best_(best), residual_rms_(residual_rms) {}
  const VoigtParams& best() const noexcept { return best_; }
  double residual_rms() const noexcept { return residual_rms_; }

 private:
  VoigtParams best_;
  double residual_rms_;
};

/// Profile value, offset included.
double voigt_eval(const VoigtParams& p, double x);

template <typename Derived>
Vector voigt_eval(const VoigtParams& p, const Eigen::MatrixBase<Derived>& x) {
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = voigt_eval(p, x[i]);
  return out;
}

/// Analytic report quantities; FWHM is the combined pseudo-Voigt width.
PeakReport make_report(const VoigtParams& p, double residual_rms);

/// Argmax center, max-min amplitude, half-maximum span shared equally by
/// the two widths, window minimum as offset.
VoigtParams initial_guess(const Spectrum& s, FitWindow window);

FitResult fit_peak(const Spectrum& s, FitWindow window, const VoigtParams& init, const FitOptions& options = {});
FitResult fit_peak(const Spectrum& s, FitWindow window, const FitOptions& options = {});

// ---- Monte-Carlo sensitivity study ---------------------------------------

/// The eight tracked quantities, G then 2D: position, fwhm, intensity, area.
const std::vector<std::string>& study_parameter_names();

struct StudyRow {
  double noise_level = 0.0;
  std::string param_name;
  double mean = 0.0;
  double std = 0.0;
  int n_failures = 0;
};

struct StudyTable {
  std::vector<double> levels;
  std::vector<StudyRow> rows;  // level-major, parameter-minor

  /// levels x 16 matrix: (mean, std) for each of the 8 parameters.
  Eigen::MatrixXd wide() const;
  const StudyRow& at(std::size_t level_index, const std::string& param) const;
};

/// One clean spectrum is drawn from the profile; at every level `reps`
/// independently noised copies are fitted in the G and 2D windows.
StudyTable noise_sensitivity_study(const ClassProfile& p, std::span<const double> levels, int reps, std::uint64_t seed,
                                   const Vector& grid = standard_grid());

void write_study_csv(const StudyTable& t, std::ostream& out);

}  // namespace specbench
