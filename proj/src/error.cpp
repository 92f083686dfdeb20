#include "trc/error.hpp"

namespace trc {

const char* errc_name(Errc c) noexcept {
    switch (c) {
    case Errc::RankDeficientDesign: return "RankDeficientDesign";
    case Errc::InsufficientSampleSize: return "InsufficientSampleSize";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::NonIdentifiable: return "NonIdentifiable";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::SingularOperatorSum: return "SingularOperatorSum";
    case Errc::MissingVariance: return "MissingVariance";
    case Errc::InvalidLevel: return "InvalidLevel";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::FileNotFound: return "FileNotFound";
    case Errc::ParseError: return "ParseError";
    case Errc::MissingColumn: return "MissingColumn";
    }
    return "Unknown";
}

static std::string compose(Errc code, const std::string& subject, const std::string& detail) {
    std::string s = errc_name(code);
    if (!subject.empty()) s += " [" + subject + "]";
    if (!detail.empty()) s += ": " + detail;
    return s;
}

Error::Error(Errc code, std::string subject, const std::string& detail)
    : std::runtime_error(compose(code, subject, detail)), code_(code), subject_(std::move(subject)), detail_(detail) {}

}  // namespace trc
