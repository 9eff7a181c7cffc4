#pragma once

#include "neslam/scene.hpp"

#include <cstdio>
#include <filesystem>
#include <string>

namespace neslam::testing {

/// Scene configuration small enough for unit tests: a 3.2 m box, the standard
/// decoder layout.
inline SceneConfig small_scene_config() {
    SceneConfig cfg;
    cfg.bounds = Aabb{Vec3(-1.6, -1.6, -1.6), Vec3(1.6, 1.6, 1.6)};
    return cfg;
}

/// Pretrained decoders are expensive to fit, so test binaries share a cached
/// checkpoint in the working directory (atomically renamed into place).
inline const SceneModel& pretrained_model() {
    static SceneModel model = [] {
        const std::string cache = "pretrained_scene_cache.bin";
        if (std::filesystem::exists(cache)) {
            try {
                return SceneModel::load(cache);
            } catch (const Error&) {
                std::filesystem::remove(cache);
            }
        }
        SceneModel m = SceneModel::create(small_scene_config());
        PretrainConfig pc;
        pc.steps = 1200;
        pc.batch = 256;
        pretrain_decoders(m, pc);
        const std::string tmp = cache + ".tmp." + std::to_string(::getpid());
        m.save(tmp);
        std::filesystem::rename(tmp, cache);
        return m;
    }();
    return model;
}

}  // namespace neslam::testing
