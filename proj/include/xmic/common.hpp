#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmic {

using Scalar = double;
using Shape = std::vector<std::size_t>;

// Error taxonomy. Every failure the library can raise derives from Error so
// callers can distinguish validation problems from genuine runtime faults.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct BadShapeError : Error {
    explicit BadShapeError(const std::string& msg) : Error("BadShape: " + msg) {}
};
struct DimMismatchError : Error {
    explicit DimMismatchError(const std::string& msg) : Error("DimMismatch: " + msg) {}
};
struct ZeroNormError : Error {
    explicit ZeroNormError(const std::string& msg) : Error("ZeroNorm: " + msg) {}
};
struct NotNormalizedError : Error {
    explicit NotNormalizedError(const std::string& msg) : Error("NotNormalized: " + msg) {}
};
struct EmptySequenceError : Error {
    explicit EmptySequenceError(const std::string& msg) : Error("EmptySequence: " + msg) {}
};
struct BadLabelError : Error {
    explicit BadLabelError(const std::string& msg) : Error("BadLabel: " + msg) {}
};
struct EmptyClassNameError : Error {
    explicit EmptyClassNameError(const std::string& msg) : Error("EmptyClassName: " + msg) {}
};
struct NotScalarError : Error {
    explicit NotScalarError(const std::string& msg) : Error("NotScalar: " + msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("IoError: " + msg) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("FormatError: " + msg) {}
};
struct TaskMismatchError : Error {
    explicit TaskMismatchError(const std::string& msg) : Error("TaskMismatch: " + msg) {}
};
struct MissingLabelError : Error {
    explicit MissingLabelError(const std::string& msg) : Error("MissingLabel: " + msg) {}
};
struct VocabularyMismatchError : Error {
    explicit VocabularyMismatchError(const std::string& msg) : Error("VocabularyMismatch: " + msg) {}
};
struct BadSpecError : Error {
    explicit BadSpecError(const std::string& msg) : Error("BadSpec: " + msg) {}
};
struct IncompatibleCompositionError : Error {
    explicit IncompatibleCompositionError(const std::string& msg)
        : Error("IncompatibleComposition: " + msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("ConfigError: " + msg) {}
};

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace xmic
