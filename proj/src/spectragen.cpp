#include "specbench/spectragen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "specbench/io.hpp"
#include "specbench/lineshape.hpp"

namespace specbench {

namespace {

void validate_peak(const PeakProfile& p, const std::string& owner) {
  const auto& m = p.mean;
  const auto& j = p.jitter;
  const std::string where = "profile '" + owner + "' peak '" + p.label + "'";
  if (j.center < 0 || j.fwhm_lorentz < 0 || j.fwhm_gauss < 0 || j.amplitude < 0)
    throw DataError(where + ": jitter half-widths must be >= 0");
  if (m.fwhm_lorentz - j.fwhm_lorentz < 0 || m.fwhm_gauss - j.fwhm_gauss < 0)
    throw DataError(where + ": widths must stay >= 0 over the jitter range");
  if (m.fwhm_lorentz - j.fwhm_lorentz <= 0 && m.fwhm_gauss - j.fwhm_gauss <= 0)
    throw DataError(where + ": Lorentzian and Gaussian widths cannot both reach 0");
  if (m.amplitude - j.amplitude <= 0) throw DataError(where + ": amplitude must stay > 0 over the jitter range");
}

PeakModel draw(const PeakProfile& p, Rng& rng) {
  auto pick = [&](double mean, double half) { return half > 0 ? uniform(rng, mean - half, mean + half) : mean; };
  PeakModel out;
  out.center = pick(p.mean.center, p.jitter.center);
  out.fwhm_lorentz = std::max(0.0, pick(p.mean.fwhm_lorentz, p.jitter.fwhm_lorentz));
  out.fwhm_gauss = std::max(0.0, pick(p.mean.fwhm_gauss, p.jitter.fwhm_gauss));
  out.amplitude = pick(p.mean.amplitude, p.jitter.amplitude);
  return out;
}

std::string peak_key(const PeakProfile& p, std::size_t index) {
  return p.label.empty() ? "peak" + std::to_string(index) : p.label;
}

Vector shift_values(const Vector& axis, const Vector& y, double delta) {
  const Eigen::Index n = axis.size();
  Vector out(n);
  const double* xb = axis.data();
  const double* xe = axis.data() + n;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double src = axis[i] - delta;
    if (src <= axis[0]) {
      out[i] = y[0];
    } else if (src >= axis[n - 1]) {
      out[i] = y[n - 1];
    } else {
      const auto j = std::clamp<Eigen::Index>(std::upper_bound(xb, xe, src) - xb - 1, 0, n - 2);
      const double t = (src - axis[j]) / (axis[j + 1] - axis[j]);
      out[i] = y[j] + t * (y[j + 1] - y[j]);
    }
  }
  return out;
}

Vector noise_values(const Vector& axis, const Vector& y, const NoiseSpec& n, Rng& rng) {
  if (n.level == 0.0) return y;
  const double half = n.half_width(noise_reference(axis, y, n));
  Vector out = y;
  std::uniform_real_distribution<double> dist(-half, half);
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += dist(rng);
  return out;
}

PeakModel peak_from_json(const nlohmann::json& j) {
  PeakModel m;
  m.center = j.value("center", 0.0);
  m.fwhm_lorentz = j.value("fwhm_lorentz", 0.0);
  m.fwhm_gauss = j.value("fwhm_gauss", 0.0);
  m.amplitude = j.value("amplitude", 0.0);
  return m;
}

nlohmann::json peak_to_json(const PeakModel& m) {
  return {{"center", m.center}, {"fwhm_lorentz", m.fwhm_lorentz}, {"fwhm_gauss", m.fwhm_gauss}, {"amplitude", m.amplitude}};
}

}  // namespace

void ClassProfile::validate() const {
  if (peaks.empty()) throw DataError("profile '" + name + "' needs at least one peak");
  if (count < 1) throw DataError("profile '" + name + "' count must be >= 1");
  if (cosmic_ray_rate < 0 || cosmic_ray_rate > 1) throw DataError("profile '" + name + "' cosmic_ray_rate outside [0, 1]");
  for (const auto& p : peaks) validate_peak(p, name);
}

void NoiseSpec::validate() const {
  if (!(level >= 0.0 && level <= kMaxNoiseLevel))
    throw RangeError("noise level " + format_double(level) + " outside [0, 0.5]");
  if (!(ref_lo < ref_hi)) throw DataError("noise reference window is empty");
}

Spectrum synth_spectrum(const ClassProfile& p, const Vector& grid, Rng& rng) {
  p.validate();
  Vector y = Vector::Constant(grid.size(), p.baseline);
  Meta meta{{"class", p.name}};
  for (std::size_t k = 0; k < p.peaks.size(); ++k) {
    const PeakModel m = draw(p.peaks[k], rng);
    for (Eigen::Index i = 0; i < grid.size(); ++i)
      y[i] += pseudo_voigt(grid[i], m.center, m.fwhm_gauss, m.fwhm_lorentz, m.amplitude);
    const std::string key = peak_key(p.peaks[k], k);
    meta[key + ".center"] = format_double(m.center);
    meta[key + ".fwhm_lorentz"] = format_double(m.fwhm_lorentz);
    meta[key + ".fwhm_gauss"] = format_double(m.fwhm_gauss);
    meta[key + ".amplitude"] = format_double(m.amplitude);
  }
  if (p.cosmic_ray_rate > 0 && uniform(rng, 0.0, 1.0) < p.cosmic_ray_rate) {
    std::uniform_int_distribution<Eigen::Index> where(0, grid.size() - 1);
    const Eigen::Index bin = where(rng);
    const double height = uniform(rng, 0.5, 2.0) * y.maxCoeff();
    y[bin] += height;
    meta["cosmic_ray_bin"] = std::to_string(bin);
  }
  return Spectrum(grid, std::move(y), std::move(meta));
}

SpectraDataset synth_dataset(std::span<const ClassProfile> profiles, const Vector& grid, std::uint64_t seed) {
  if (profiles.size() < 2) throw DataError("synth_dataset needs at least 2 profiles");
  std::set<std::string> seen;
  Eigen::Index total = 0;
  for (const auto& p : profiles) {
    p.validate();
    if (!seen.insert(p.name).second) throw DataError("duplicate class name '" + p.name + "'");
    total += p.count;
  }
  RowMatrix rows(total, grid.size());
  Labels labels;
  labels.reserve(static_cast<std::size_t>(total));
  std::vector<std::string> names;
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < profiles.size(); ++c) {
    names.push_back(profiles[c].name);
    for (int i = 0; i < profiles[c].count; ++i, ++r) {
      Rng rng(derive_seed(seed, {c, static_cast<std::uint64_t>(i)}));
      rows.row(r) = synth_spectrum(profiles[c], grid, rng).intensity().transpose();
      labels.push_back(static_cast<int>(c));
    }
  }
  return SpectraDataset(grid, std::move(rows), std::move(labels), std::move(names),
                        {{"source", "synthetic"}, {"seed", std::to_string(seed)}});
}

double noise_reference(const Vector& axis, const Vector& intensity, const NoiseSpec& n) {
  double ref = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < axis.size(); ++i)
    if (axis[i] >= n.ref_lo && axis[i] <= n.ref_hi) ref = std::max(ref, intensity[i]);
  if (!std::isfinite(ref)) throw RangeError("noise reference window contains no bins");
  return std::abs(ref);
}

Spectrum add_noise(const Spectrum& s, const NoiseSpec& n, Rng& rng) {
  n.validate();
  return s.with_intensity(noise_values(s.axis(), s.intensity(), n, rng));
}

Spectrum shift_peaks(const Spectrum& s, double delta) {
  if (!(std::abs(delta) <= kMaxShift)) throw RangeError("peak shift " + format_double(delta) + " exceeds +/-30 cm^-1");
  if (delta == 0.0) return s;
  return s.with_intensity(shift_values(s.axis(), s.intensity(), delta));
}

SpectraDataset augment_dataset(const SpectraDataset& d, const NoiseSpec& n, double shift_range, Rng& rng,
                               AugmentMode mode) {
  n.validate();
  if (!(shift_range >= 0.0 && shift_range <= kMaxShift))
    throw RangeError("shift range " + format_double(shift_range) + " outside [0, 30]");
  const std::uint64_t base = rng();
  const Eigen::Index rows_in = d.n_spectra();
  RowMatrix out(mode == AugmentMode::append ? 2 * rows_in : rows_in, d.n_bins());
  Eigen::Index offset = 0;
  if (mode == AugmentMode::append) {
    out.topRows(rows_in) = d.rows();
    offset = rows_in;
  }
  for (Eigen::Index i = 0; i < rows_in; ++i) {
    Rng row_rng(derive_seed(base, {static_cast<std::uint64_t>(i)}));
    Vector y = d.rows().row(i).transpose();
    if (shift_range > 0.0) {
      const double delta = uniform(row_rng, -shift_range, shift_range);
      y = shift_values(d.grid(), y, delta);
    }
    y = noise_values(d.grid(), y, n, row_rng);
    out.row(offset + i) = y.transpose();
  }
  Labels labels = d.labels();
  if (mode == AugmentMode::append) labels.insert(labels.end(), d.labels().begin(), d.labels().end());
  return SpectraDataset(d.grid(), std::move(out), std::move(labels), d.class_names(), d.provenance());
}

SpectraDataset add_noise_dataset(const SpectraDataset& d, const NoiseSpec& n, std::uint64_t seed) {
  n.validate();
  if (n.level == 0.0) return d;
  RowMatrix out(d.n_spectra(), d.n_bins());
  for (Eigen::Index i = 0; i < d.n_spectra(); ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    out.row(i) = noise_values(d.grid(), d.rows().row(i).transpose(), n, rng).transpose();
  }
  return d.with_rows(std::move(out));
}

// ---- configuration --------------------------------------------------------

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  try {
    c.name = j.value("name", std::string("custom"));
    for (const auto& pj : j.at("profiles")) {
      ClassProfile p;
      p.name = pj.at("name").get<std::string>();
      p.count = pj.at("count").get<int>();
      p.baseline = pj.value("baseline", 0.0);
      p.cosmic_ray_rate = pj.value("cosmic_ray_rate", 0.0);
      if (pj.contains("charge_range")) p.charge_range = pj.at("charge_range").get<std::array<double, 2>>();
      for (const auto& kj : pj.at("peaks")) {
        PeakProfile peak;
        peak.label = kj.value("label", std::string());
        peak.mean = peak_from_json(kj);
        if (kj.contains("jitter")) peak.jitter = peak_from_json(kj.at("jitter"));
        else peak.jitter = PeakModel{0, 0, 0, 0};
        p.peaks.push_back(std::move(peak));
      }
      p.validate();
      c.profiles.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad generator config: ") + e.what());
  }
  if (c.profiles.size() < 2) throw DataError("generator config needs at least 2 profiles");
  return c;
}

nlohmann::json to_json(const GeneratorConfig& c) {
  nlohmann::json profiles = nlohmann::json::array();
  for (const auto& p : c.profiles) {
    nlohmann::json peaks = nlohmann::json::array();
    for (const auto& k : p.peaks) {
      auto pj = peak_to_json(k.mean);
      pj["label"] = k.label;
      pj["jitter"] = peak_to_json(k.jitter);
      peaks.push_back(std::move(pj));
    }
    profiles.push_back({{"name", p.name},
                        {"count", p.count},
                        {"baseline", p.baseline},
                        {"charge_range", p.charge_range},
                        {"cosmic_ray_rate", p.cosmic_ray_rate},
                        {"peaks", peaks}});
  }
  return {{"name", c.name}, {"profiles", profiles}};
}

GeneratorConfig preset(const std::string& name) {
  return generator_config_from_json(nlohmann::json::parse(preset_json(name)));
}

SpectraDataset prepared_dataset(const GeneratorConfig& config, std::uint64_t seed) {
  const SpectraDataset raw = synth_dataset(config.profiles, acquisition_grid(), seed);
  return prepare_standard(raw).with_provenance("preset", config.name);
}

SpectraDataset prepared_preset(const std::string& name, std::uint64_t seed) {
  return prepared_dataset(preset(name), seed);
}

}  // namespace specbench
