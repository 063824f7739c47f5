#include "vmfcomp/networks.hpp"

#include <iostream>

namespace vmfcomp {

void ArchitectureConfig::validate() const {
  if (height <= 0 || width <= 0 || feature_channels <= 0 || num_kernels <= 0 || num_classes <= 0 ||
      classifier_hidden <= 0)
    throw ShapeMismatch("architecture: all dimensions must be positive");
  int64_t s = feature_stride;
  if (s < 2) throw ShapeMismatch("architecture: feature_stride must be >= 2");
  while (s > 1) {
    if (s % 2) throw ShapeMismatch("architecture: feature_stride must be a power of two");
    s >>= 1;
  }
  const int64_t L = pool_levels();
  const int64_t div = int64_t(1) << L;
  if (height % div || width % div)
    throw ShapeMismatch("architecture: input " + std::to_string(height) + "x" +
                        std::to_string(width) + " must be divisible by " + std::to_string(div));
  if (feature_channels % (int64_t(1) << (L - 1)))
    throw ShapeMismatch("architecture: feature_channels must be divisible by " +
                        std::to_string(int64_t(1) << (L - 1)));
  if (feature_channels < num_kernels)
    std::cerr << "[vmfcomp] warning: feature_channels (" << feature_channels
              << ") < num_kernels (" << num_kernels << "); D >= J is recommended\n";
}

}  // namespace vmfcomp
