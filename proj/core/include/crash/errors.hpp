#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace crash {

// Error taxonomy shared by every module. The CLI maps kinds onto exit codes
// (input-ish errors -> 3, training/numeric -> 4).
enum class ErrorKind {
    Shape,
    Input,
    Config,
    Parameter,
    Format,
    Provenance,
    DegenerateInput,
    DegenerateGeometry,
    Numeric,
    Training,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error(ErrorKind::Shape, m) {}
};

struct InputError : Error {
    explicit InputError(const std::string& m) : Error(ErrorKind::Input, m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::Config, m) {}
};

struct ParameterError : Error {
    explicit ParameterError(const std::string& m) : Error(ErrorKind::Parameter, m) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error(ErrorKind::Format, m) {}
};

struct ProvenanceError : Error {
    explicit ProvenanceError(const std::string& m) : Error(ErrorKind::Provenance, m) {}
};

struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& m) : Error(ErrorKind::DegenerateInput, m) {}
};

struct DegenerateGeometryError : Error {
    explicit DegenerateGeometryError(const std::string& m) : Error(ErrorKind::DegenerateGeometry, m) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};

// Carries the last step whose loss was still finite, plus the curve up to it.
class TrainingError : public Error {
public:
    TrainingError(const std::string& m, std::size_t last_finite_step, std::vector<double> curve)
        : Error(ErrorKind::Training, m),
          last_finite_step(last_finite_step),
          loss_curve(std::move(curve)) {}

    std::size_t last_finite_step;
    std::vector<double> loss_curve;
};

}  // namespace crash
