#pragma once

extern "C" void openblas_set_num_threads(int);

namespace wnet {

inline const char* version() { return "0.1.0"; }

// Pin BLAS to one thread so results are bitwise independent of the host's
// core count.
inline void runtime_init() { openblas_set_num_threads(1); }

}  // namespace wnet
