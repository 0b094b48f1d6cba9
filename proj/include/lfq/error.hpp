#pragma once

#include <stdexcept>
#include <string>

namespace lfq {

// Every failure the library reports derives from Error; the kind lets the
// CLI map failures onto exit codes without string matching.
enum class ErrorKind {
    dimension,
    contract,
    numeric,
    format,
    state,
    io,
};

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

class DimensionError : public Error {
   public:
    explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};

class ContractError : public Error {
   public:
    explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};

class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class FormatError : public Error {
   public:
    explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class StateError : public Error {
   public:
    explicit StateError(const std::string& what) : Error(ErrorKind::state, what) {}
};

class IoError : public Error {
   public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

}  // namespace lfq
