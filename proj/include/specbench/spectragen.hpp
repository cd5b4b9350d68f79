#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "specbench/core.hpp"
#include "specbench/seed.hpp"

namespace specbench {

/// One Raman band: center and component widths in cm^-1, peak height.
struct PeakModel {
  double center = 0.0;
  double fwhm_lorentz = 0.0;
  double fwhm_gauss = 0.0;
  double amplitude = 1.0;
};

/// A band whose parameters are drawn uniformly from mean +/- jitter.
struct PeakProfile {
  std::string label;
  PeakModel mean;
  PeakModel jitter;  // half-widths, all >= 0
};

/// Generator parameters for one synthetic class.
struct ClassProfile {
  std::string name;
  std::vector<PeakProfile> peaks;
  double baseline = 0.0;
  int count = 1;
  // Carrier density interval in 1e11 cm^-2 the class stands for. Not used
  // by the generator.
  std::array<double, 2> charge_range{0.0, 0.0};
  // Probability that a spectrum carries one single-bin cosmic-ray spike.
  double cosmic_ray_rate = 0.0;

  void validate() const;
};

struct GeneratorConfig {
  std::string name;
  std::vector<ClassProfile> profiles;
};

enum class NoiseConvention { range, amplitude };

/// Additive uniform noise scaled to the maximum intensity inside a
/// reference window (the 2D band by default). Under the `range` convention
/// the peak-to-peak width of the perturbation is level * I_ref; under
/// `amplitude` it is twice that.
struct NoiseSpec {
  double level = 0.0;
  double ref_lo = 2550.0;
  double ref_hi = 2850.0;
  NoiseConvention convention = NoiseConvention::range;

  void validate() const;
  double half_width(double i_ref) const {
    return convention == NoiseConvention::range ? 0.5 * level * i_ref : level * i_ref;
  }
};

inline constexpr double kMaxShift = 30.0;
inline constexpr double kMaxNoiseLevel = 0.5;

enum class AugmentMode { replace, append };

// ---- generation -----------------------------------------------------------

/// Sum of pseudo-Voigt bands plus baseline. The drawn band parameters are
/// recorded in meta as "<label>.center", "<label>.fwhm_lorentz", ...
Spectrum synth_spectrum(const ClassProfile& p, const Vector& grid, Rng& rng);

/// Rows grouped by profile order; row r of class c uses the stream
/// derive_seed(seed, {c, r}).
SpectraDataset synth_dataset(std::span<const ClassProfile> profiles, const Vector& grid, std::uint64_t seed);

// ---- augmentation ---------------------------------------------------------

/// Maximum intensity inside the noise reference window.
double noise_reference(const Vector& axis, const Vector& intensity, const NoiseSpec& n);

Spectrum add_noise(const Spectrum& s, const NoiseSpec& n, Rng& rng);

/// Translates the intensity pattern by `delta` cm^-1 on the fixed grid
/// (linear interpolation, boundary-value fill). |delta| <= 30.
Spectrum shift_peaks(const Spectrum& s, double delta);

/// Every row shifted by Uniform(-shift_range, shift_range) then noised.
SpectraDataset augment_dataset(const SpectraDataset& d, const NoiseSpec& n, double shift_range, Rng& rng,
                               AugmentMode mode = AugmentMode::replace);

/// Noise only, row r using the stream derive_seed(seed, {r}).
SpectraDataset add_noise_dataset(const SpectraDataset& d, const NoiseSpec& n, std::uint64_t seed);

// ---- configuration --------------------------------------------------------

GeneratorConfig generator_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GeneratorConfig& c);

/// Names of the built-in presets ("charge_mimic", "dielectric_mimic").
std::vector<std::string> preset_names();
GeneratorConfig preset(const std::string& name);
/// Raw JSON text of a built-in preset.
std::string preset_json(const std::string& name);

/// Generates a preset on the acquisition grid and applies the standard
/// preparation (despike, crop, resample, rescale).
SpectraDataset prepared_preset(const std::string& name, std::uint64_t seed);
SpectraDataset prepared_dataset(const GeneratorConfig& config, std::uint64_t seed);

}  // namespace specbench
