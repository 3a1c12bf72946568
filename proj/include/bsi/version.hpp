#pragma once

namespace bsi {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace bsi
