#pragma once

#include <stdexcept>
#include <string>

namespace trc {

enum class Errc {
    RankDeficientDesign,
    InsufficientSampleSize,
    NonFiniteInput,
    NonIdentifiable,
    DimensionMismatch,
    SingularOperatorSum,
    MissingVariance,
    InvalidLevel,
    InvalidSpec,
    FileNotFound,
    ParseError,
    MissingColumn,
};

const char* errc_name(Errc c) noexcept;

// subject names the matrix, field, file or stage that failed
class Error : public std::runtime_error {
public:
    Error(Errc code, std::string subject, const std::string& detail);

    Errc code() const noexcept { return code_; }
    const std::string& subject() const noexcept { return subject_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    Errc code_;
    std::string subject_;
    std::string detail_;
};

}  // namespace trc
