#pragma once

namespace crthte {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kApiVersion = "v1";

}  // namespace crthte
