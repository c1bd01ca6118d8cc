#pragma once

#include <string>
#include <vector>

#include "perc/optim.hpp"
#include "perc/tensor.hpp"

namespace perc {

// Parameter checkpoint, magic "PCKP". Layout after the magic:
//   version u8 (currently 1)
//   repeated until EOF:
//     name_len u16 LE | name bytes (UTF-8)
//     rank u8 | dims u32 LE each
//     payload: rank-product f32 LE values
// Values are stored as f32 regardless of the in-memory scalar type.

template <typename S>
void save_checkpoint(const std::string& path, const ParamList<S>& params);

// loads into matching names; throws FormatError on malformed bytes and
// MismatchError when a stored shape disagrees or a parameter is missing
template <typename S>
void load_checkpoint(const std::string& path, ParamList<S>& params);

// raw read, for inspection and tests
struct RawParam {
  std::string name;
  Shape shape;
  std::vector<float> data;
};
std::vector<RawParam> read_checkpoint_raw(const std::string& path);

}  // namespace perc
