#pragma once

#include <map>
#include <string>

#include "kloc/tracer.hpp"

namespace kloc {

/// Standalone SVG heatmap of one AIE grid: bucket rows, layer columns,
/// min-max normalized single-hue ramp with the scale endpoints printed.
/// No timestamps or other run-varying content; bytes depend only on the
/// grid, the title and the metadata lines.
std::string emit_heatmap_svg(const TraceGrid& grid, const std::string& title,
                             const std::map<std::string, std::string>& metadata = {});

}  // namespace kloc
