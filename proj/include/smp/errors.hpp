#pragma once

#include <stdexcept>
#include <string>

namespace smp {

// Base for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SMP_DEFINE_ERROR(Name)               \
  class Name : public Error {                \
   public:                                   \
    explicit Name(const std::string& what)   \
        : Error(std::string(#Name ": ") + what) {} \
  }

// morphology
SMP_DEFINE_ERROR(ParseError);
SMP_DEFINE_ERROR(ValidationError);
SMP_DEFINE_ERROR(UnknownLimb);
SMP_DEFINE_ERROR(EmptyVariantSet);

// sim
SMP_DEFINE_ERROR(NonFiniteState);

// autodiff
SMP_DEFINE_ERROR(ShapeMismatch);
SMP_DEFINE_ERROR(NonScalarLoss);
SMP_DEFINE_ERROR(TapeConsumed);
SMP_DEFINE_ERROR(MissingGradient);
SMP_DEFINE_ERROR(CheckpointError);

// policy
SMP_DEFINE_ERROR(DimensionMismatch);
SMP_DEFINE_ERROR(TooManyChildren);

// rl / trainer
SMP_DEFINE_ERROR(BufferTooSmall);
SMP_DEFINE_ERROR(BranchingExceedsCmax);

// baseline
SMP_DEFINE_ERROR(UnregisteredEnv);

// analysis
SMP_DEFINE_ERROR(SchemeMismatch);
SMP_DEFINE_ERROR(DegenerateData);

#undef SMP_DEFINE_ERROR

}  // namespace smp
