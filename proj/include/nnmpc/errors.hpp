#pragma once

#include <stdexcept>
#include <string>

namespace nnmpc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
   public:
    using Error::Error;
};

class ValidationError : public Error {
   public:
    using Error::Error;
};

class SimulationFault : public Error {
   public:
    using Error::Error;
};

class EquilibriumNotFound : public Error {
   public:
    using Error::Error;
};

class InfeasibleSetpoint : public Error {
   public:
    using Error::Error;
};

class TuningFailure : public Error {
   public:
    using Error::Error;
};

class TrainingDiverged : public Error {
   public:
    using Error::Error;
};

/// Raised when two checks that must agree do not (e.g. Schur A with singular I - A).
class InternalInconsistency : public Error {
   public:
    using Error::Error;
};

/// Error tagged with the pipeline stage that produced it.
class StageError : public Error {
   public:
    StageError(std::string stage, const std::string& what)
        : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

   private:
    std::string stage_;
};

namespace detail {
inline void require_dims(bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
}
}  // namespace detail

}  // namespace nnmpc
