#pragma once

#include <cmath>
#include <numbers>

namespace specbench {

/// Pseudo-Voigt line shape: a Lorentzian and a Gaussian with a shared FWHM
/// mixed linearly. The shared width and the mixing ratio follow the
/// Thompson-Cox-Hastings combination of the component widths.
///
/// All profiles here are peak-normalized: value `amplitude` at the center.
template <typename Scalar>
struct PseudoVoigtWidth {
  Scalar fwhm;  // combined full width at half maximum
  Scalar eta;   // Lorentzian fraction in [0, 1]
  // Partial derivatives with respect to the Gaussian and Lorentzian FWHM.
  Scalar dfwhm_dg;
  Scalar dfwhm_dl;
  Scalar deta_dg;
  Scalar deta_dl;
};

template <typename Scalar>
PseudoVoigtWidth<Scalar> pseudo_voigt_width(Scalar fwhm_gauss, Scalar fwhm_lorentz) {
  const Scalar g = fwhm_gauss;
  const Scalar l = fwhm_lorentz;
  const Scalar g2 = g * g, g3 = g2 * g, g4 = g3 * g, g5 = g4 * g;
  const Scalar l2 = l * l, l3 = l2 * l, l4 = l3 * l, l5 = l4 * l;
  const Scalar p = g5 + Scalar(2.69269) * g4 * l + Scalar(2.42843) * g3 * l2 + Scalar(4.47163) * g2 * l3 +
                   Scalar(0.07842) * g * l4 + l5;
  const Scalar dp_dg = Scalar(5) * g4 + Scalar(4 * 2.69269) * g3 * l + Scalar(3 * 2.42843) * g2 * l2 +
                       Scalar(2 * 4.47163) * g * l3 + Scalar(0.07842) * l4;
  const Scalar dp_dl = Scalar(2.69269) * g4 + Scalar(2 * 2.42843) * g3 * l + Scalar(3 * 4.47163) * g2 * l2 +
                       Scalar(4 * 0.07842) * g * l3 + Scalar(5) * l4;
  const Scalar f = std::pow(p, Scalar(0.2));
  const Scalar f4 = f * f * f * f;
  const Scalar df_dg = dp_dg / (Scalar(5) * f4);
  const Scalar df_dl = dp_dl / (Scalar(5) * f4);

  const Scalar r = l / f;
  const Scalar eta = Scalar(1.36603) * r - Scalar(0.47719) * r * r + Scalar(0.11116) * r * r * r;
  const Scalar deta_dr = Scalar(1.36603) - Scalar(2 * 0.47719) * r + Scalar(3 * 0.11116) * r * r;
  const Scalar dr_dg = -l / (f * f) * df_dg;
  const Scalar dr_dl = Scalar(1) / f - l / (f * f) * df_dl;
  return {f, eta, df_dg, df_dl, deta_dr * dr_dg, deta_dr * dr_dl};
}

/// Value of a peak-normalized pseudo-Voigt at x.
template <typename Scalar>
Scalar pseudo_voigt(Scalar x, Scalar center, Scalar fwhm_gauss, Scalar fwhm_lorentz, Scalar amplitude) {
  const auto w = pseudo_voigt_width(fwhm_gauss, fwhm_lorentz);
  const Scalar u = (x - center) / w.fwhm;
  const Scalar lor = Scalar(1) / (Scalar(1) + Scalar(4) * u * u);
  const Scalar gau = std::exp(-Scalar(4) * std::numbers::ln2_v<Scalar> * u * u);
  return amplitude * (w.eta * lor + (Scalar(1) - w.eta) * gau);
}

/// Integral over the real line of a peak-normalized pseudo-Voigt.
template <typename Scalar>
Scalar pseudo_voigt_area(Scalar fwhm_gauss, Scalar fwhm_lorentz, Scalar amplitude) {
  const auto w = pseudo_voigt_width(fwhm_gauss, fwhm_lorentz);
  const Scalar lor = std::numbers::pi_v<Scalar> * w.fwhm / Scalar(2);
  const Scalar gau = w.fwhm / Scalar(2) * std::sqrt(std::numbers::pi_v<Scalar> / std::numbers::ln2_v<Scalar>);
  return amplitude * (w.eta * lor + (Scalar(1) - w.eta) * gau);
}

/// Gaussian FWHM per unit standard deviation, 2 sqrt(2 ln 2).
template <typename Scalar>
inline constexpr Scalar kSigmaToFwhm = Scalar(2.3548200450309493);

}  // namespace specbench
