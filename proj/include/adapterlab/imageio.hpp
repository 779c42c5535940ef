#pragma once

#include <string>

#include "adapterlab/tensor.hpp"

namespace adapterlab {

/// Binary P6, [3 x H x W] mapped affinely from [-1, 1] to [0, 255].
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

struct MapRange {
  double min = 0.0;
  double max = 0.0;
};

/// Binary P5 of an [H x W] map normalised to its own range; the range also
/// goes to `<path>.json`. A constant map is written as all zeros.
MapRange write_pgm(const std::string& path, const Tensor& map);

/// Creates `dir` and its parents. Throws DataError on failure.
void ensure_directory(const std::string& dir);

}  // namespace adapterlab
