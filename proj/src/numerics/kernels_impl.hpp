#pragma once

#include "sinkgate/numerics/kernels.hpp"

namespace sinkgate::kernels::detail {

extern const KernelTable kScalarTable;

// Defined in kernels_avx2.cpp / kernels_neon.cpp when those variants are built.
const KernelTable* avx2_table();
const KernelTable* neon_table();

}  // namespace sinkgate::kernels::detail
