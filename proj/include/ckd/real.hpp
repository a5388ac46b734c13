#pragma once

namespace ckd {

// Element type of all tensors. The training build uses 32-bit floats;
// defining CKD_REAL_F64 rebuilds the library in double precision, which the
// finite-difference gradient checks rely on.
#ifdef CKD_REAL_F64
using real = double;
#else
using real = float;
#endif

}  // namespace ckd
