#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace rmp {

// FNV-1a, used for content hashes in manifests and model provenance.
std::uint64_t fnv1a64(std::string_view bytes);

std::string to_hex(std::uint64_t value);

}  // namespace rmp
