#pragma once

#include <stdexcept>
#include <string>

namespace vmfcomp {

// Base class for everything this library throws on contract violations.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define VMFCOMP_ERROR_TYPE(Name)        \
  struct Name : Error {                 \
    using Error::Error;                 \
  }

// vmf_core
VMFCOMP_ERROR_TYPE(ZeroFeatureVector);
VMFCOMP_ERROR_TYPE(ZeroKernel);
VMFCOMP_ERROR_TYPE(DimensionMismatch);
VMFCOMP_ERROR_TYPE(DegenerateActivation);

// losses / networks
VMFCOMP_ERROR_TYPE(ShapeMismatch);
VMFCOMP_ERROR_TYPE(MissingStopGradient);

// trainers
VMFCOMP_ERROR_TYPE(SettingMismatch);
VMFCOMP_ERROR_TYPE(EmptyDataset);
VMFCOMP_ERROR_TYPE(IncompatibleCheckpoint);

// Raised when a training step produces a NaN/Inf loss; carries the ids of the
// offending batch so the run can be diagnosed.
struct NonFiniteLoss : Error {
  explicit NonFiniteLoss(const std::string& msg, std::string batch_dump = "")
      : Error(msg), batch(std::move(batch_dump)) {}
  std::string batch;
};

// data
VMFCOMP_ERROR_TYPE(InvalidFraction);
VMFCOMP_ERROR_TYPE(CorruptFile);
VMFCOMP_ERROR_TYPE(MissingField);

// eval
VMFCOMP_ERROR_TYPE(NoMatchedChannel);
VMFCOMP_ERROR_TYPE(FactorOutOfBounds);
VMFCOMP_ERROR_TYPE(EmptyFactorSet);

// cli
VMFCOMP_ERROR_TYPE(ConfigError);
VMFCOMP_ERROR_TYPE(MissingSample);

#undef VMFCOMP_ERROR_TYPE

}  // namespace vmfcomp
