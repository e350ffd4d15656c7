#include "sblab/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace sblab {

const char* role_name(Role r) {
    switch (r) {
        case Role::Train: return "train";
        case Role::Val: return "val";
        case Role::Test: return "test";
    }
    return "?";
}

const char* family_name(ActionFamily f) {
    return f == ActionFamily::Cardinal ? "cardinal" : "diagonal";
}

std::pair<int, int> action_velocity(ActionFamily family, int action) {
    int idx = family == ActionFamily::Cardinal ? action : (action + 1) % 8;
    return kVelocities[static_cast<size_t>(idx)];
}

void DatasetSpec::validate() const {
    if (num_actions < 1 || num_actions > static_cast<int>(kVelocities.size()))
        throw ConfigError("num_actions must be in [1," + std::to_string(kVelocities.size()) +
                          "], got " + std::to_string(num_actions));
    if (num_scenes < 1) throw ConfigError("num_scenes must be positive");
    if (frames < 1 || height < 3 || width < 3)
        throw ConfigError("clip dims too small: T=" + std::to_string(frames) + " H=" +
                          std::to_string(height) + " W=" + std::to_string(width));
    if (num_scenes * num_scenes > width)
        throw ConfigError("num_scenes^2 must not exceed width so stripe widths stay distinguishable");
    if (bias < 0.0 || bias > 1.0)
        throw ConfigError("bias must be in [0,1], got " + fmt_g17(bias));
    if (count < 1) throw ConfigError("count must be positive");
}

namespace {

// All generated pixel values are exactly representable in f32 so the SBD1
// f64 -> f32 -> f64 round trip is bit-exact.
const double kDark = static_cast<double>(0.3f);
const double kLight = static_cast<double>(0.7f);
const double kSprite = 1.0;

inline int wrap(int v, int n) {
    int r = v % n;
    return r < 0 ? r + n : r;
}

}  // namespace

Clip render_clip(int action, int scene, int start_row, int start_col, const DatasetSpec& spec) {
    spec.validate();
    if (action < 0 || action >= spec.num_actions)
        throw ContractError("render_clip: action " + std::to_string(action) + " out of [0," +
                            std::to_string(spec.num_actions) + ")");
    if (scene < 0 || scene >= spec.num_scenes)
        throw ContractError("render_clip: scene " + std::to_string(scene) + " out of [0," +
                            std::to_string(spec.num_scenes) + ")");
    if (start_row < 0 || start_row >= spec.height || start_col < 0 || start_col >= spec.width)
        throw ContractError("render_clip: start position out of range");

    const int T = spec.frames, H = spec.height, W = spec.width;
    Clip c;
    c.frames = T;
    c.height = H;
    c.width = W;
    c.action = action;
    c.scene = scene;
    c.pixels.assign(static_cast<size_t>(T) * H * W, 0.0);
    c.actor_mask.assign(static_cast<size_t>(T) * H * W, 0);

    // Vertical stripes of width scene+1, alternating 0.3 / 0.7.
    int stripe = scene + 1;
    std::vector<double> row(W);
    for (int x = 0; x < W; ++x) row[x] = ((x / stripe) % 2 == 0) ? kDark : kLight;
    for (int t = 0; t < T; ++t)
        for (int y = 0; y < H; ++y)
            std::memcpy(&c.pixels[c.idx(t, y, 0)], row.data(), sizeof(double) * W);

    // 3x3 sprite moving with toroidal wrap.
    auto [vr, vc] = action_velocity(spec.family, action);
    for (int t = 0; t < T; ++t) {
        int cy = wrap(start_row + t * vr, H);
        int cx = wrap(start_col + t * vc, W);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                size_t i = c.idx(t, wrap(cy + dy, H), wrap(cx + dx, W));
                c.pixels[i] = kSprite;
                c.actor_mask[i] = 1;
            }
    }
    return c;
}

Clip generate_clip(const DatasetSpec& spec, Role role, int index) {
    Rng rng = Rng::from_words({spec.seed, static_cast<uint64_t>(role), static_cast<uint64_t>(index)});
    int action = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_actions)));
    double u = rng.next_unit();
    int scene = u < spec.bias ? action % spec.num_scenes
                              : static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_scenes)));
    int start_row = static_cast<int>(rng.below(static_cast<uint64_t>(spec.height)));
    int start_col = static_cast<int>(rng.below(static_cast<uint64_t>(spec.width)));
    return render_clip(action, scene, start_row, start_col, spec);
}

DatasetSplit generate_dataset(const DatasetSpec& spec, Role role) {
    spec.validate();
    DatasetSplit split;
    split.spec = spec;
    split.role = role;
    split.clips.reserve(static_cast<size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) split.clips.push_back(generate_clip(spec, role, i));
    return split;
}

Clip mask_actor(const Clip& clip) {
    Clip out = clip;
    const int T = clip.frames;
    const size_t frame_px = static_cast<size_t>(clip.height) * clip.width;
    for (int t = 0; t < T; ++t) {
        const double* src = clip.pixels.data() + static_cast<size_t>(t) * frame_px;
        const uint8_t* m = clip.actor_mask.data() + static_cast<size_t>(t) * frame_px;
        // Frame mean with the mask region excluded, which makes the filled
        // frame's own mean equal the fill value and re-application a no-op.
        double sum = 0.0;
        size_t n = 0;
        for (size_t i = 0; i < frame_px; ++i)
            if (!m[i]) {
                sum += src[i];
                ++n;
            }
        if (n == 0) {  // fully masked frame: fall back to the plain mean
            for (size_t i = 0; i < frame_px; ++i) sum += src[i];
            n = frame_px;
        }
        // Rounded to the nearest f32 so the SBD1 round trip stays bit-exact.
        double mean = static_cast<double>(static_cast<float>(sum / static_cast<double>(n)));
        double* dst = out.pixels.data() + static_cast<size_t>(t) * frame_px;
        for (size_t i = 0; i < frame_px; ++i)
            if (m[i]) dst[i] = mean;
    }
    return out;
}

double empirical_bias_rate(const DatasetSplit& split) {
    if (split.clips.empty()) return 0.0;
    size_t hits = 0;
    for (const Clip& c : split.clips)
        if (c.scene == c.action % split.spec.num_scenes) ++hits;
    return static_cast<double>(hits) / static_cast<double>(split.clips.size());
}

namespace {

constexpr char kMagic[4] = {'S', 'B', 'D', '1'};

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

struct Reader {
    std::string path;
    std::ifstream in;
    size_t offset = 0;

    explicit Reader(const std::string& p) : path(p), in(p, std::ios::binary) {
        if (!in) throw DataFormatError("cannot open dataset file " + p);
    }

    void read(char* dst, size_t n) {
        in.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in.gcount()) != n)
            throw DataFormatError("truncated dataset file " + path + " at offset " +
                                  std::to_string(offset));
        offset += n;
    }

    uint32_t u32() {
        unsigned char b[4];
        read(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }

    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }

    uint16_t u16() {
        unsigned char b[2];
        read(reinterpret_cast<char*>(b), 2);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }

    uint8_t u8() {
        unsigned char b;
        read(reinterpret_cast<char*>(&b), 1);
        return b;
    }
};

}  // namespace

void write_dataset(const std::string& path, const DatasetSplit& split) {
    const DatasetSpec& s = split.spec;
    if (static_cast<int>(split.clips.size()) != s.count)
        throw ContractError("dataset clip count does not match spec");
    std::string buf;
    const size_t px = static_cast<size_t>(s.frames) * s.height * s.width;
    const size_t mask_bytes = (px + 7) / 8;
    buf.reserve(38 + split.clips.size() * (4 + px * 4 + mask_bytes));
    buf.append(kMagic, 4);
    put_u32(buf, static_cast<uint32_t>(s.num_actions));
    put_u32(buf, static_cast<uint32_t>(s.num_scenes));
    put_u32(buf, static_cast<uint32_t>(s.frames));
    put_u32(buf, static_cast<uint32_t>(s.height));
    put_u32(buf, static_cast<uint32_t>(s.width));
    put_u32(buf, static_cast<uint32_t>(s.count));
    put_u64(buf, s.seed);
    buf.push_back(static_cast<char>(split.role));
    buf.push_back(static_cast<char>(s.family));
    for (const Clip& c : split.clips) {
        put_u16(buf, static_cast<uint16_t>(c.action));
        put_u16(buf, static_cast<uint16_t>(c.scene));
        for (size_t i = 0; i < px; ++i) {
            float f = static_cast<float>(c.pixels[i]);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(buf, bits);
        }
        for (size_t i = 0; i < mask_bytes; ++i) {
            uint8_t b = 0;
            for (size_t j = 0; j < 8; ++j) {
                size_t k = i * 8 + j;
                if (k < px && c.actor_mask[k]) b |= static_cast<uint8_t>(1u << j);
            }
            buf.push_back(static_cast<char>(b));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write dataset file " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("short write to dataset file " + path);
}

DatasetSplit read_dataset(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw DataFormatError("bad magic in " + path + " at offset 0: expected SBD1");
    DatasetSpec s;
    s.num_actions = static_cast<int>(r.u32());
    s.num_scenes = static_cast<int>(r.u32());
    s.frames = static_cast<int>(r.u32());
    s.height = static_cast<int>(r.u32());
    s.width = static_cast<int>(r.u32());
    s.count = static_cast<int>(r.u32());
    s.seed = r.u64();
    uint8_t role = r.u8();
    uint8_t family = r.u8();
    if (role > 2)
        throw DataFormatError("bad role byte in " + path + " at offset " +
                              std::to_string(r.offset - 2));
    if (family > 1)
        throw DataFormatError("bad action-family byte in " + path + " at offset " +
                              std::to_string(r.offset - 1));
    s.family = static_cast<ActionFamily>(family);
    try {
        s.validate();
    } catch (const ConfigError& e) {
        throw DataFormatError("invalid header in " + path + ": " + e.what());
    }

    DatasetSplit split;
    split.spec = s;
    split.role = static_cast<Role>(role);
    split.clips.reserve(static_cast<size_t>(s.count));
    const size_t px = static_cast<size_t>(s.frames) * s.height * s.width;
    const size_t mask_bytes = (px + 7) / 8;
    std::vector<char> mask_buf(mask_bytes);
    for (int i = 0; i < s.count; ++i) {
        Clip c;
        c.frames = s.frames;
        c.height = s.height;
        c.width = s.width;
        c.action = r.u16();
        c.scene = r.u16();
        if (c.action >= s.num_actions || c.scene >= s.num_scenes)
            throw DataFormatError("label out of range in " + path + " at offset " +
                                  std::to_string(r.offset - 4));
        c.pixels.resize(px);
        for (size_t k = 0; k < px; ++k) {
            uint32_t bits = r.u32();
            float f;
            std::memcpy(&f, &bits, 4);
            c.pixels[k] = static_cast<double>(f);
        }
        r.read(mask_buf.data(), mask_bytes);
        c.actor_mask.assign(px, 0);
        for (size_t k = 0; k < px; ++k)
            if (mask_buf[k / 8] & (1 << (k % 8))) c.actor_mask[k] = 1;
        split.clips.push_back(std::move(c));
    }
    return split;
}

}  // namespace sblab
