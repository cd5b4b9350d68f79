#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "specbench/peakfit.hpp"

using namespace specbench;

namespace {

ClassProfile band_profile(double g_center, double g_fl, double g_fg, double d_center, double d_fl) {
  ClassProfile p;
  p.name = "bands";
  p.peaks = {{"G", {g_center, g_fl, g_fg, 0.6}, {0, 0, 0, 0}}, {"2D", {d_center, d_fl, 5.0, 1.0}, {0, 0, 0, 0}}};
  p.baseline = 0.05;
  return p;
}

double meta_value(const Spectrum& s, const std::string& key) { return std::stod(s.meta().at(key)); }

}  // namespace

TEST_CASE("voigt_eval limits and shape") {
  const double c = 1600.0;
  SUBCASE("vanishing Gaussian width is the Lorentzian") {
    const VoigtParams p{c, 1e-9, 6.0, 2.0, 0.0};
    for (double x = 1500; x <= 1700; x += 0.7) {
      const double lor = 2.0 * 36.0 / ((x - c) * (x - c) + 36.0);
      CHECK(std::abs(voigt_eval(p, x) - lor) < 1e-6);
    }
  }
  SUBCASE("vanishing Lorentzian width is the Gaussian") {
    const double sigma = 5.0;
    const VoigtParams p{c, sigma, 1e-9, 2.0, 0.0};
    for (double x = 1500; x <= 1700; x += 0.7) {
      const double gau = 2.0 * std::exp(-(x - c) * (x - c) / (2 * sigma * sigma));
      CHECK(std::abs(voigt_eval(p, x) - gau) < 1e-6);
    }
  }
  SUBCASE("unimodal and symmetric") {
    const VoigtParams p{c, 3.0, 4.0, 1.5, 0.2};
    const double top = voigt_eval(p, c);
    CHECK(top == doctest::Approx(1.7));
    for (double d = 0.01; d < 300; d *= 1.3) {
      CHECK(voigt_eval(p, c + d) <= top);
      CHECK(voigt_eval(p, c - d) == doctest::Approx(voigt_eval(p, c + d)).epsilon(1e-14));
    }
  }
  SUBCASE("area matches quadrature") {
    const VoigtParams p{c, 3.0, 4.0, 1.5, 0.0};
    // Integrate analytically beyond +/-L: Lorentzian tail dominates, Gaussian is 0.
    const double L = 2000.0, h = 0.01;
    double sum = 0;
    for (double x = c - L; x <= c + L; x += h) sum += voigt_eval(p, x) * h;
    const auto w = pseudo_voigt_width(p.fwhm_gauss(), p.fwhm_lorentz());
    const double tail = 2 * p.amplitude * w.eta * (w.fwhm / 2) * (std::numbers::pi / 2 - std::atan(2 * L / w.fwhm));
    CHECK(sum + tail == doctest::Approx(make_report(p, 0).area).epsilon(1e-4));
  }
  SUBCASE("invalid params") {
    CHECK_THROWS_AS((VoigtParams{c, 0, 0, 1, 0}.validate()), DataError);
    CHECK_THROWS_AS((VoigtParams{c, 1, -1, 1, 0}.validate()), DataError);
    CHECK_THROWS_AS((VoigtParams{c, 1, 1, 0, 0}.validate()), DataError);
  }
}

TEST_CASE("fit_peak") {
  const Vector grid = standard_grid();
  const double spacing = grid[1] - grid[0];

  SUBCASE("noiseless synthetic bands are recovered") {
    Rng rng(1);
    for (auto [gc, gl, gg, dc, dl] : {std::tuple{1582.3, 16.0, 4.0, 2679.4, 33.0}, std::tuple{1588.9, 8.5, 4.5, 2684.2, 24.0},
                                      std::tuple{1590.0, 12.0, 0.5, 2691.7, 18.0}}) {
      const Spectrum s = synth_spectrum(band_profile(gc, gl, gg, dc, dl), grid, rng);
      for (const auto& [window, label] : {std::pair{kGWindow, std::string("G")}, std::pair{k2DWindow, std::string("2D")}}) {
        const FitResult r = fit_peak(s, window);
        const double true_center = meta_value(s, label + ".center");
        const double true_fwhm =
            pseudo_voigt_width(meta_value(s, label + ".fwhm_gauss"), meta_value(s, label + ".fwhm_lorentz")).fwhm;
        CHECK(std::abs(r.report.position - true_center) < 0.05);
        CHECK(std::abs(r.report.position - true_center) <= spacing / 10);
        CHECK(std::abs(r.report.fwhm / true_fwhm - 1) < 0.01);
        CHECK(r.report.residual_rms <= r.initial_residual_rms);
        CHECK_FALSE(r.poor_fit);
      }
    }
  }
  SUBCASE("starting at the truth converges immediately") {
    const VoigtParams truth{2680.7, 3.0, 14.0, 1.0, 0.05};
    const Spectrum s(grid, voigt_eval(truth, grid));
    const FitResult r = fit_peak(s, k2DWindow, truth);
    CHECK(r.iterations <= 2);
    CHECK(r.report.residual_rms < 1e-12);
  }
  SUBCASE("report quantities are analytic in the params") {
    const VoigtParams truth{1585.0, 2.0, 6.0, 0.7, 0.1};
    const Spectrum s(grid, voigt_eval(truth, grid));
    const FitResult r = fit_peak(s, kGWindow);
    const PeakReport again = make_report(r.params, r.report.residual_rms);
    CHECK(again.fwhm == r.report.fwhm);
    CHECK(again.area == r.report.area);
    CHECK(r.report.fwhm > 0);
    CHECK(r.report.area > 0);
  }
  SUBCASE("pure noise is flagged") {
    Rng rng(77);
    Vector y(grid.size());
    for (auto& v : y) v = uniform(rng, 0, 1);
    const Spectrum s(grid, y);
    bool flagged = false;
    try {
      flagged = fit_peak(s, kGWindow).poor_fit;
    } catch (const FitError& e) {
      flagged = true;
      CHECK(std::isfinite(e.residual_rms()));
    }
    CHECK(flagged);
  }
  SUBCASE("window errors") {
    const Spectrum s(grid, Vector::Ones(grid.size()));
    CHECK_THROWS_AS(fit_peak(s, FitWindow{1500, 1510}), DataError);
    CHECK_THROWS_AS(fit_peak(s, kGWindow, VoigtParams{2000, 1, 1, 1, 0}), DataError);
  }
  SUBCASE("budget exhaustion raises with the best params") {
    Rng rng(1);
    const Spectrum s = synth_spectrum(band_profile(1583, 14, 4, 2680, 30), grid, rng);
    FitOptions tight;
    tight.max_iterations = 1;
    const VoigtParams far{1530, 20, 20, 0.1, 0.3};
    CHECK_THROWS_AS(fit_peak(s, kGWindow, far, tight), FitError);
  }
}

TEST_CASE("noise_sensitivity_study") {
  const ClassProfile p = band_profile(1585, 12, 4, 2680, 30);
  SUBCASE("level 0 has no spread") {
    const std::vector<double> levels{0.0};
    const StudyTable t = noise_sensitivity_study(p, levels, 5, 3);
    for (const auto& name : study_parameter_names()) CHECK(t.at(0, name).std < 1e-6);
  }
  SUBCASE("shape, monotone spread, csv") {
    const std::vector<double> levels{0.01, 0.05, 0.10, 0.20};
    const StudyTable t = noise_sensitivity_study(p, levels, 100, 8);
    const Eigen::MatrixXd w = t.wide();
    CHECK(w.rows() == 4);
    CHECK(w.cols() == 16);
    CHECK(t.at(2, "G_position").std > t.at(0, "G_position").std);
    std::ostringstream csv;
    write_study_csv(t, csv);
    const std::string text = csv.str();
    CHECK(text.rfind("noise_level,param_name,mean,std,n_failures\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 4 * 8);
  }
  SUBCASE("reps < 2 rejected") {
    const std::vector<double> levels{0.1};
    CHECK_THROWS_AS(noise_sensitivity_study(p, levels, 1, 1), DataError);
  }
}
