#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sblab/common.hpp"

namespace sblab {

enum class Role : uint8_t { Train = 0, Val = 1, Test = 2 };
enum class ActionFamily : uint8_t { Cardinal = 0, Diagonal = 1 };

const char* role_name(Role r);
const char* family_name(ActionFamily f);

// The eight unit step velocities (drow, dcol). CARDINAL actions index this
// table directly; DIAGONAL shifts the assignment by one so the same motions
// carry disjoint label semantics.
inline constexpr std::array<std::pair<int, int>, 8> kVelocities{
    {{0, 1}, {0, -1}, {1, 0}, {-1, 0}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}}};

std::pair<int, int> action_velocity(ActionFamily family, int action);

struct DatasetSpec {
    int num_actions = 8;   // N
    int num_scenes = 4;    // M
    int frames = 8;        // T
    int height = 16;       // H
    int width = 16;        // W
    double bias = 0.9;     // beta
    int count = 2000;
    uint64_t seed = 7;
    ActionFamily family = ActionFamily::Cardinal;

    void validate() const;
};

// One synthetic video: stripe background encodes the scene, a moving 3x3
// sprite encodes the action. Pixels and mask are stored frame-major.
struct Clip {
    int frames = 0, height = 0, width = 0;
    int action = 0, scene = 0;
    std::vector<double> pixels;      // T*H*W, values in [0,1]
    std::vector<uint8_t> actor_mask; // T*H*W, 1 where the sprite is

    size_t idx(int t, int y, int x) const {
        return (static_cast<size_t>(t) * height + y) * width + x;
    }
    double px(int t, int y, int x) const { return pixels[idx(t, y, x)]; }
};

struct DatasetSplit {
    DatasetSpec spec;
    Role role = Role::Train;
    std::vector<Clip> clips;
};

// Soft or hard distribution over the M scene classes.
struct PseudoSceneLabel {
    std::vector<double> dist;
};

Clip render_clip(int action, int scene, int start_row, int start_col, const DatasetSpec& spec);
Clip generate_clip(const DatasetSpec& spec, Role role, int index);
DatasetSplit generate_dataset(const DatasetSpec& spec, Role role);

// Replaces actor pixels with the mean of all pixels of that frame (mean
// rounded to the nearest f32 so file round-trips stay exact). The input clip
// is left untouched.
Clip mask_actor(const Clip& clip);

// Fraction of clips with scene == action mod M.
double empirical_bias_rate(const DatasetSplit& split);

// SBD1 binary dataset file.
void write_dataset(const std::string& path, const DatasetSplit& split);
DatasetSplit read_dataset(const std::string& path);

}  // namespace sblab
