#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace eqdp {

/// Error taxonomy. Every failure mode the library promises to detect maps to
/// one of these types so callers (and tests) can discriminate without string
/// matching.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define EQDP_ERROR_TYPE(NAME)                                   \
  struct NAME : Error {                                         \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

EQDP_ERROR_TYPE(ContinuousGroup);       // finite enumeration asked of SO(2)
EQDP_ERROR_TYPE(ElementGroupMismatch);  // element does not belong to the group
EQDP_ERROR_TYPE(OddRotationOrder);      // restriction needs an even rotation order
EQDP_ERROR_TYPE(Undersampled);          // too few samples for the band limit
EQDP_ERROR_TYPE(UnsupportedKernelSize); // kernel size outside {1,3,5,7}
EQDP_ERROR_TYPE(LengthMismatch);        // coefficient/basis length disagreement
EQDP_ERROR_TYPE(ShapeMismatch);         // tensor shape disagreement
EQDP_ERROR_TYPE(IrrepFieldType);        // op requires trivial/regular fields only
EQDP_ERROR_TYPE(NonIrrepFieldType);     // op requires an SO(2) irrep field type
EQDP_ERROR_TYPE(NoTape);                // gradient requested without a recorded tape
EQDP_ERROR_TYPE(InvalidRate);           // sampling rate outside (0,1]
EQDP_ERROR_TYPE(EmptyOrderGrid);        // accountant needs a non-empty order grid
EQDP_ERROR_TYPE(ConfigError);           // bad or inconsistent configuration
EQDP_ERROR_TYPE(MalformedRecord);       // dataset/checkpoint bytes do not parse
EQDP_ERROR_TYPE(IoError);               // file could not be read/written
EQDP_ERROR_TYPE(BudgetExceeded);        // privacy budget cannot cover the run

#undef EQDP_ERROR_TYPE

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kTwoPi = 2.0 * kPi;

/// Angle normalized into [0, 2*pi).
inline double wrap_angle(double a) {
  double r = a - kTwoPi * static_cast<long long>(a / kTwoPi);
  if (r < 0) r += kTwoPi;
  if (r >= kTwoPi) r -= kTwoPi;  // guard against rounding at the seam
  return r;
}

}  // namespace eqdp
