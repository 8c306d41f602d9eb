#pragma once

namespace nthlab {

// Build identifier embedded in every output file. CMake overrides this with
// `git describe` when available.
#ifndef NTHLAB_BUILD_ID
#define NTHLAB_BUILD_ID "nth-lab-0.1.0"
#endif

inline const char* build_id() { return NTHLAB_BUILD_ID; }

} // namespace nthlab
