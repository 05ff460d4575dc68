#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace istd {

/// Nine significant digits, the fixed precision of every printed number.
inline std::string g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

/// `v` rounded to nine significant digits, so JSON output carries no more.
inline double round9(double v) { return std::strtod(g9(v).c_str(), nullptr); }

}  // namespace istd
