#include "vcdm/errors.hpp"

#include <sstream>

namespace vcdm {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kInvalidArgument: return "invalid-argument";
        case ErrorKind::kNumericFailure: return "numeric-failure";
        case ErrorKind::kBackendUnavailable: return "backend-unavailable";
        case ErrorKind::kNotReady: return "not-ready";
        case ErrorKind::kConfiguration: return "configuration-error";
        case ErrorKind::kCacheCorrupt: return "cache-corrupt";
        case ErrorKind::kIncompatibleCheckpoint: return "incompatible-checkpoint";
        case ErrorKind::kDegenerateCodebook: return "degenerate-codebook";
        case ErrorKind::kIo: return "io-error";
    }
    return "unknown";
}

namespace {

std::string describe(const std::string& what, double sigma, long step) {
    std::ostringstream os;
    os << what;
    if (sigma >= 0.0) os << " (sigma=" << sigma << ")";
    if (step >= 0) os << " (step=" << step << ")";
    return os.str();
}

}  // namespace

NumericFailure::NumericFailure(const std::string& what, double sigma, long step)
    : Error(ErrorKind::kNumericFailure, describe(what, sigma, step)), sigma_(sigma), step_(step) {}

}  // namespace vcdm
