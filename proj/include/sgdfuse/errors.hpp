#pragma once

#include <stdexcept>
#include <string>

namespace sgdfuse {

// Base class for every error the library raises on purpose. Catch this at the
// CLI boundary; anything else escaping is a bug.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error("dimension: " + msg) {}
};

class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error("value: " + msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class RangeError : public Error {
public:
    explicit RangeError(const std::string& msg) : Error("range: " + msg) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error("numerical: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

class EmptyDatasetError : public Error {
public:
    explicit EmptyDatasetError(const std::string& msg) : Error("empty dataset: " + msg) {}
};

class RemoteMaskError : public Error {
public:
    explicit RemoteMaskError(const std::string& msg) : Error("remote mask: " + msg) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& msg) : Error("checkpoint: " + msg) {}
};

} // namespace sgdfuse
