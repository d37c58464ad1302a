#pragma once

namespace vardeblur {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace vardeblur
