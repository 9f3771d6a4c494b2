#pragma once

#include <string>

#include "canas/arch_space.hpp"

namespace canas::testing {

inline std::string source_path(const std::string& rel) {
    return std::string(CANAS_SOURCE_DIR) + "/" + rel;
}

inline SpaceSpec table1_space() { return load_space(source_path("spaces/elasticvit.space")); }
inline SpaceSpec micro_space() { return load_space(source_path("spaces/micro.space")); }
inline SpaceSpec toy_space() { return load_space(source_path("spaces/toy.space")); }

}  // namespace canas::testing
