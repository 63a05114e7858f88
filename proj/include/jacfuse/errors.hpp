// errors.hpp - exception taxonomy shared by all jacfuse modules.
#pragma once

#include <stdexcept>
#include <string>

namespace jacfuse {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define JACFUSE_DEFINE_ERROR(Name)                                            \
  struct Name : Error {                                                       \
    explicit Name(const std::string &what_arg) : Error(what_arg) {}           \
  }

// volume / nifti
JACFUSE_DEFINE_ERROR(BadMagic);
JACFUSE_DEFINE_ERROR(UnsupportedDatatype);
JACFUSE_DEFINE_ERROR(TruncatedFile);
JACFUSE_DEFINE_ERROR(HeaderInconsistent);
JACFUSE_DEFINE_ERROR(IoError);
JACFUSE_DEFINE_ERROR(OverflowError);

// preprocess
JACFUSE_DEFINE_ERROR(DegenerateFit);
JACFUSE_DEFINE_ERROR(EmptyMask);

// registration
JACFUSE_DEFINE_ERROR(SingularTransform);
JACFUSE_DEFINE_ERROR(NoDonorAvailable);

// dataset
JACFUSE_DEFINE_ERROR(InvalidCdr);
JACFUSE_DEFINE_ERROR(ZeroVariance);
JACFUSE_DEFINE_ERROR(TooFewSamples);
JACFUSE_DEFINE_ERROR(MissingClass);
JACFUSE_DEFINE_ERROR(ClassTooSmall);

// models
JACFUSE_DEFINE_ERROR(ShapeMismatch);
JACFUSE_DEFINE_ERROR(SingleClass);
JACFUSE_DEFINE_ERROR(DimensionMismatch);

// fusion
JACFUSE_DEFINE_ERROR(EmptyInput);
JACFUSE_DEFINE_ERROR(MalformedDistribution);
JACFUSE_DEFINE_ERROR(NoModalities);

// evaluate
JACFUSE_DEFINE_ERROR(LengthMismatch);
JACFUSE_DEFINE_ERROR(AllUndefined);

// phantom
JACFUSE_DEFINE_ERROR(TooFewSubjects);

// config / cli
JACFUSE_DEFINE_ERROR(InvalidConfig);

#undef JACFUSE_DEFINE_ERROR

} // namespace jacfuse
