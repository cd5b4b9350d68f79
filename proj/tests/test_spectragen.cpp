#include <doctest.h>

#include <cmath>

#include "specbench/spectragen.hpp"

using namespace specbench;

namespace {

PeakProfile fixed_peak(const std::string& label, double center, double fl, double fg, double amp) {
  return {label, {center, fl, fg, amp}, {0, 0, 0, 0}};
}

ClassProfile graphene_profile(const std::string& name, int count = 1) {
  ClassProfile p;
  p.name = name;
  p.peaks = {fixed_peak("G", 1590, 14, 4, 0.5), fixed_peak("2D", 2680, 30, 4, 1.0)};
  p.baseline = 0.05;
  p.count = count;
  return p;
}

Eigen::Index argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return i;
}

}  // namespace

TEST_CASE("synth_spectrum") {
  const Vector grid = standard_grid();
  SUBCASE("single Lorentzian peaks at the nearest bin") {
    ClassProfile p;
    p.name = "one";
    p.peaks = {fixed_peak("L", 2001.3, 12, 0, 1)};
    Rng rng(1);
    const Spectrum s = synth_spectrum(p, grid, rng);
    const Eigen::Index nearest = [&] {
      Eigen::Index best = 0;
      (grid.array() - 2001.3).abs().minCoeff(&best);
      return best;
    }();
    CHECK(argmax(s.intensity()) == nearest);
    CHECK(s.meta().at("L.center") == "2001.3");
  }
  SUBCASE("G and 2D give exactly two local maxima above baseline") {
    Rng rng(2);
    const Spectrum s = synth_spectrum(graphene_profile("g"), grid, rng);
    const Vector& y = s.intensity();
    std::vector<double> maxima;
    for (Eigen::Index i = 1; i + 1 < y.size(); ++i)
      if (y[i] > y[i - 1] && y[i] > y[i + 1] && y[i] > 0.05) maxima.push_back(grid[i]);
    REQUIRE(maxima.size() == 2);
    CHECK(std::abs(maxima[0] - 1590) < 2.35);
    CHECK(std::abs(maxima[1] - 2680) < 2.35);
  }
  SUBCASE("same seed, same spectrum") {
    ClassProfile p = graphene_profile("g");
    p.peaks[0].jitter = {2, 2, 0.5, 0.05};
    Rng a(7), b(7);
    CHECK(synth_spectrum(p, grid, a).intensity() == synth_spectrum(p, grid, b).intensity());
  }
  SUBCASE("drawn parameters stay inside mean +/- jitter") {
    ClassProfile p = graphene_profile("g");
    p.peaks[1].jitter = {7, 4, 0.5, 0.05};
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
      const Spectrum s = synth_spectrum(p, grid, rng);
      CHECK(std::abs(std::stod(s.meta().at("2D.center")) - 2680) <= 7);
      CHECK(std::abs(std::stod(s.meta().at("2D.fwhm_lorentz")) - 30) <= 4);
    }
  }
  SUBCASE("invalid profiles") {
    ClassProfile p = graphene_profile("g");
    p.peaks[0].jitter.amplitude = 0.6;
    CHECK_THROWS_AS(p.validate(), DataError);
    p = graphene_profile("g");
    p.peaks.clear();
    CHECK_THROWS_AS(p.validate(), DataError);
  }
}

TEST_CASE("synth_dataset") {
  const Vector grid = standard_grid();
  SUBCASE("two profiles of five") {
    const std::vector<ClassProfile> ps{graphene_profile("a", 5), graphene_profile("b", 5)};
    const auto d = synth_dataset(ps, grid, 1);
    CHECK(d.n_spectra() == 10);
    CHECK(d.labels() == Labels{0, 0, 0, 0, 0, 1, 1, 1, 1, 1});
  }
  SUBCASE("preset totals") {
    const auto charge = preset("charge_mimic");
    const auto dc = synth_dataset(charge.profiles, grid, 1);
    CHECK(dc.n_spectra() == 2112);
    CHECK(dc.class_counts() == std::vector<int>{484, 633, 753, 242});
    const auto diel = preset("dielectric_mimic");
    const auto dd = synth_dataset(diel.profiles, grid, 1);
    CHECK(dd.n_spectra() == 4419);
    CHECK(dd.class_counts() == std::vector<int>{1355, 1386, 727, 951});
  }
  SUBCASE("duplicate names and single profile rejected") {
    const std::vector<ClassProfile> dup{graphene_profile("a"), graphene_profile("a")};
    CHECK_THROWS_AS(synth_dataset(dup, grid, 1), DataError);
    const std::vector<ClassProfile> one{graphene_profile("a")};
    CHECK_THROWS_AS(synth_dataset(one, grid, 1), DataError);
  }
  SUBCASE("unknown preset") { CHECK_THROWS_AS(preset("nope"), DataError); }
  SUBCASE("config json round trip") {
    const auto c = preset("charge_mimic");
    const auto back = generator_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
  }
}

TEST_CASE("add_noise") {
  SUBCASE("level 0 is the identity") {
    const Vector grid = standard_grid();
    Rng rng(1), rng2(1);
    const Spectrum s = synth_spectrum(graphene_profile("g"), grid, rng);
    CHECK(add_noise(s, NoiseSpec{}, rng2).intensity() == s.intensity());
  }
  SUBCASE("level 0.05 with unit reference over 1e5 draws") {
    const Vector axis = linspace(2000, 3000, 100000);
    Vector y = Vector::Zero(axis.size());
    y[60000] = 1.0;  // inside the 2D window
    const Spectrum s(axis, y);
    NoiseSpec n;
    n.level = 0.05;
    Rng rng(123);
    const Vector delta = add_noise(s, n, rng).intensity() - y;
    CHECK(delta.cwiseAbs().maxCoeff() <= 0.025);
    const double range = delta.maxCoeff() - delta.minCoeff();
    CHECK(range >= 0.049);
    CHECK(range <= 0.050);
  }
  SUBCASE("amplitude convention doubles the spread") {
    const Vector axis = linspace(2500, 2900, 20000);
    const Spectrum s(axis, Vector::Ones(axis.size()));
    NoiseSpec n;
    n.level = 0.1;
    n.convention = NoiseConvention::amplitude;
    Rng rng(4);
    const Vector delta = add_noise(s, n, rng).intensity() - s.intensity();
    CHECK(delta.cwiseAbs().maxCoeff() <= 0.1);
    CHECK(delta.maxCoeff() - delta.minCoeff() > 0.19);
  }
  SUBCASE("level bounds") {
    NoiseSpec n;
    n.level = 0.5;
    CHECK_NOTHROW(n.validate());
    n.level = 0.5000001;
    CHECK_THROWS_AS(n.validate(), RangeError);
    n.level = -0.01;
    CHECK_THROWS_AS(n.validate(), RangeError);
  }
  SUBCASE("property: hard per-bin bound") {
    const Vector grid = standard_grid();
    Rng rng(9);
    ClassProfile p = graphene_profile("g");
    p.peaks[1].jitter = {5, 3, 1, 0.1};
    for (int t = 0; t < 50; ++t) {
      const Spectrum s = synth_spectrum(p, grid, rng);
      NoiseSpec n;
      n.level = uniform(rng, 0, 0.5);
      const double bound = 0.5 * n.level * noise_reference(grid, s.intensity(), n);
      const Vector delta = add_noise(s, n, rng).intensity() - s.intensity();
      CHECK(delta.cwiseAbs().maxCoeff() <= bound * (1 + 1e-12));
    }
  }
}

TEST_CASE("shift_peaks") {
  const Vector grid = standard_grid();
  const double spacing = grid[1] - grid[0];
  Rng rng(5);
  const Spectrum s = synth_spectrum(graphene_profile("g"), grid, rng);

  SUBCASE("delta 0 is the identity") { CHECK(shift_peaks(s, 0).intensity() == s.intensity()); }
  SUBCASE("+30 moves the argmax by 13 bins") {
    CHECK(argmax(shift_peaks(s, 30).intensity()) - argmax(s.intensity()) == std::lround(30 / spacing));
    CHECK(std::lround(30 / spacing) == 13);
  }
  SUBCASE("grid is preserved") {
    const Spectrum t = shift_peaks(s, -17.5);
    CHECK(t.axis() == s.axis());
    CHECK(t.size() == s.size());
  }
  SUBCASE("out of range") {
    CHECK_THROWS_AS(shift_peaks(s, 30.01), RangeError);
    CHECK_THROWS_AS(shift_peaks(s, -31), RangeError);
  }
  SUBCASE("whole-bin round trip is exact away from edges") {
    const double delta = 12 * spacing;
    const Vector back = shift_peaks(shift_peaks(s, -delta), delta).intensity();
    const Eigen::Index n = s.size();
    CHECK((back.segment(13, n - 26) - s.intensity().segment(13, n - 26)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("affine data round trips for any delta") {
    const Spectrum line(grid, (0.001 * grid.array() + 0.2).matrix());
    for (double delta : {30.0, 17.3, 4.1}) {
      const Vector back = shift_peaks(shift_peaks(line, -delta), delta).intensity();
      const Eigen::Index m = static_cast<Eigen::Index>(std::ceil(delta / spacing)) + 1;
      const Eigen::Index n = grid.size();
      CHECK((back.segment(m, n - 2 * m) - line.intensity().segment(m, n - 2 * m)).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
  SUBCASE("sub-bin round trip on band data stays within the interpolation error bound") {
    // Two linear interpolations, each off by at most h^2/8 * max|f''|.
    const Vector& y = s.intensity();
    double curv = 0;
    for (Eigen::Index i = 1; i + 1 < y.size(); ++i)
      curv = std::max(curv, std::abs(y[i + 1] - 2 * y[i] + y[i - 1]) / (spacing * spacing));
    const double bound = 2 * spacing * spacing / 8 * curv * 1.5;
    const Vector back = shift_peaks(shift_peaks(s, -30), 30).intensity();
    const Eigen::Index n = y.size();
    CHECK((back.segment(14, n - 28) - y.segment(14, n - 28)).cwiseAbs().maxCoeff() <= bound);
  }
}

TEST_CASE("augment_dataset") {
  const auto d = prepared_dataset(
      [] {
        auto c = preset("charge_mimic");
        for (auto& p : c.profiles) p.count = 20;
        return c;
      }(),
      3);
  SUBCASE("noise 0 and shift 0 give the same dataset") {
    Rng rng(1);
    const auto a = augment_dataset(d, NoiseSpec{}, 0.0, rng);
    CHECK(a.rows() == d.rows());
    CHECK(a.labels() == d.labels());
  }
  SUBCASE("shift 30 displaces the argmax by at most 13 bins") {
    Rng rng(2);
    const auto a = augment_dataset(d, NoiseSpec{}, 30.0, rng);
    for (Eigen::Index r = 0; r < d.n_spectra(); ++r) {
      Eigen::Index i0 = 0, i1 = 0;
      d.rows().row(r).maxCoeff(&i0);
      a.rows().row(r).maxCoeff(&i1);
      CHECK(std::abs(i1 - i0) <= 13);
    }
  }
  SUBCASE("noise 0.05 and shift 30 displace the argmax by at most 13 bins") {
    NoiseSpec n;
    n.level = 0.05;
    Rng rng(2);
    const auto a = augment_dataset(d, n, 30.0, rng);
    for (Eigen::Index r = 0; r < d.n_spectra(); ++r) {
      Eigen::Index i0 = 0, i1 = 0;
      d.rows().row(r).maxCoeff(&i0);
      a.rows().row(r).maxCoeff(&i1);
      CHECK(std::abs(i1 - i0) <= 13);
    }
  }
  SUBCASE("fixed seed is reproducible, append doubles rows") {
    NoiseSpec n;
    n.level = 0.05;
    Rng a(9), b(9);
    const auto x = augment_dataset(d, n, 30.0, a);
    const auto y = augment_dataset(d, n, 30.0, b);
    CHECK(x.rows() == y.rows());
    Rng c(9);
    const auto z = augment_dataset(d, n, 30.0, c, AugmentMode::append);
    CHECK(z.n_spectra() == 2 * d.n_spectra());
    CHECK(z.rows().topRows(d.n_spectra()) == d.rows());
  }
  SUBCASE("shift range above 30 rejected") {
    Rng rng(1);
    CHECK_THROWS_AS(augment_dataset(d, NoiseSpec{}, 31.0, rng), RangeError);
  }
}

TEST_CASE("prepared presets") {
  auto c = preset("charge_mimic");
  for (auto& p : c.profiles) p.count = 10;
  const auto d = prepared_dataset(c, 11);
  CHECK(d.n_bins() == 728);
  CHECK(d.grid() == standard_grid());
  for (Eigen::Index r = 0; r < d.n_spectra(); ++r) {
    CHECK(d.rows().row(r).minCoeff() == 0.0);
    CHECK(d.rows().row(r).maxCoeff() == 1.0);
  }
  CHECK(prepared_dataset(c, 11).rows() == d.rows());
}
