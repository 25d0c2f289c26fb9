#pragma once

#include <string>
#include <vector>

#include "capsworld/sim.hpp"

namespace capsworld::sim {

/// Dataset file layout (little-endian):
///   "CTRJ", u32 version = 1, u32 n_episodes, u32 T, u32 W, u32 n_obj,
///   then per episode: objects (n_obj x 6 f32), observations (T x W x 3 f32),
///   executed commands (T x 3 f32), poses (T x 3 f32),
///   relative coords (T x n_obj x 2 f32).
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<unsigned char> encode_dataset(const std::vector<Trajectory>& episodes);
std::vector<Trajectory> decode_dataset(std::span<const unsigned char> bytes);

void dataset_write(const std::vector<Trajectory>& episodes, const std::string& path);
std::vector<Trajectory> dataset_read(const std::string& path);

}  // namespace capsworld::sim
