/* Copyright 2026 The KESI-Desk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstddef>

namespace kesi::kernels {

// Row-major C[M x N] (+)= op(A)[M x K] * op(B)[K x N].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding;
  std::size_t out_height, out_width;
};

// One image [C x H x W] -> columns [(C*k*k) x (Ho*Wo)].
void im2col(const ConvGeometry& g, const double* image, double* columns);
// Adjoint of im2col: scatters columns back into image (accumulating).
void col2im(const ConvGeometry& g, const double* columns, double* image);

}  // namespace kesi::kernels
