#pragma once

namespace maskdiff {

inline constexpr const char* kCodeVersion = "0.3.0";

}  // namespace maskdiff
