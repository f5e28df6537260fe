#pragma once

#include <stdexcept>
#include <string>

namespace coldfuse {

// Error taxonomy. The CLI maps these onto exit codes: ConfigError -> 2,
// DataError -> 3, TransportError -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

struct TransportError : Error {
    explicit TransportError(const std::string& msg) : Error(msg) {}
};

// Invalid layer dimensions or inconsistent architecture description.
struct InvalidArchError : ConfigError {
    explicit InvalidArchError(const std::string& msg) : ConfigError(msg) {}
};

// Invalid task family specification.
struct InvalidSpecError : ConfigError {
    explicit InvalidSpecError(const std::string& msg) : ConfigError(msg) {}
};

// Manifest or tensor-shape mismatch between values that must agree.
struct ShapeError : DataError {
    explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

struct EmptyBatchError : DataError {
    explicit EmptyBatchError(const std::string& msg) : DataError(msg) {}
};

// Model head does not match the dataset's label space.
struct LabelSpaceError : DataError {
    explicit LabelSpaceError(const std::string& msg) : DataError(msg) {}
};

struct CohortError : ConfigError {
    explicit CohortError(const std::string& msg) : ConfigError(msg) {}
};

struct FoldError : ConfigError {
    explicit FoldError(const std::string& msg) : ConfigError(msg) {}
};

struct SubsampleError : DataError {
    explicit SubsampleError(const std::string& msg) : DataError(msg) {}
};

struct FusionError : DataError {
    explicit FusionError(const std::string& msg) : DataError(msg) {}
};

// Violations of the repository's iteration lifecycle (stale submissions,
// duplicate contributors, contributions that fail validation).
struct ProtocolError : DataError {
    explicit ProtocolError(const std::string& msg) : DataError(msg) {}
};

// Submission claims an iteration other than the repository's current one.
struct StaleError : ProtocolError {
    explicit StaleError(const std::string& msg) : ProtocolError(msg) {}
};

// A contributor already holds a submission slot for the current iteration.
struct DuplicateError : ProtocolError {
    explicit DuplicateError(const std::string& msg) : ProtocolError(msg) {}
};

struct SerializationError : DataError {
    explicit SerializationError(const std::string& msg) : DataError(msg) {}
};

}  // namespace coldfuse
