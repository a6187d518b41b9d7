#include "voxalign/nets.hpp"

#include <nlohmann/json.hpp>

namespace voxalign::nets {

std::string to_string(ArchKind k) {
    switch (k) {
        case ArchKind::ME: return "me";
        case ArchKind::SE: return "se";
        case ArchKind::SED: return "sed";
        case ArchKind::SNL_SED: return "snl-sed";
        case ArchKind::DNET: return "dnet";
    }
    return "?";
}

ArchKind arch_from_string(const std::string& s) {
    if (s == "me") return ArchKind::ME;
    if (s == "se") return ArchKind::SE;
    if (s == "sed") return ArchKind::SED;
    if (s == "snl-sed" || s == "snl_sed") return ArchKind::SNL_SED;
    if (s == "dnet" || s == "d-net") return ArchKind::DNET;
    throw BadConfig("unknown architecture '" + s + "'");
}

void ArchConfig::validate() const {
    if (n_down < 1) throw BadConfig("ArchConfig: n_down must be >= 1");
    const size_t len = static_cast<size_t>(n_down) + 1;
    if (d.size() != len || h.size() != len || w.size() != len || c.size() != len)
        throw BadConfig("ArchConfig: size/channel sequences must have n_down+1 entries");
    for (const auto* seq : {&d, &h, &w}) {
        for (int i = 0; i < n_down; ++i) {
            if ((*seq)[i] < 2 || (*seq)[i] != 2 * (*seq)[i + 1])
                throw BadConfig("ArchConfig: sizes must halve at every block");
        }
    }
    for (int v : c)
        if (v < 1) throw BadConfig("ArchConfig: channels must be positive");
    if (head_out != 12) throw BadConfig("ArchConfig: head_out must be 12");
    if (head_hidden < 1) throw BadConfig("ArchConfig: head_hidden must be positive");

    const bool encoder_only = kind == ArchKind::ME || kind == ArchKind::SE;
    if (encoder_only) {
        if (n_up != 0 || n_link != 0)
            throw BadConfig("ArchConfig: " + to_string(kind) + " takes no decoder or links");
    } else {
        if (n_up < 1 || n_up > n_down - 1)
            throw BadConfig("ArchConfig: decoder needs 1 <= n_up <= n_down-1");
        if (kind == ArchKind::SED) {
            if (n_link != 0) throw BadConfig("ArchConfig: plain SED takes no links");
        } else if (n_link < 1 || n_link > n_down) {
            throw BadConfig("ArchConfig: needs 1 <= n_link <= n_down");
        }
    }
}

ArchConfig ArchConfig::full_scale(ArchKind k) {
    ArchConfig cfg;
    cfg.kind = k;
    if (k == ArchKind::ME) {
        cfg.d = cfg.h = cfg.w = {64, 32, 16, 8, 4};
        cfg.c = {1, 16, 32, 64, 128};
        cfg.n_down = 4;
    } else {
        cfg.d = cfg.h = cfg.w = {64, 32, 16, 8, 4, 2, 1};
        cfg.c = {1, 16, 32, 64, 64, 64, 64};
        cfg.n_down = 6;
        if (k != ArchKind::SE) {
            cfg.n_up = 4;
            cfg.n_link = k == ArchKind::SED ? 0 : 4;
        }
    }
    return cfg;
}

ArchConfig ArchConfig::toy(ArchKind k) {
    ArchConfig cfg;
    cfg.kind = k;
    if (k == ArchKind::ME) {
        cfg.d = cfg.h = cfg.w = {16, 8, 4, 2, 1};
        cfg.c = {1, 8, 16, 32, 64};
        cfg.n_down = 4;
    } else {
        cfg.d = cfg.h = cfg.w = {16, 8, 4, 2, 1};
        cfg.c = {1, 8, 16, 16, 16};
        cfg.n_down = 4;
        if (k != ArchKind::SE) {
            cfg.n_up = 2;
            cfg.n_link = k == ArchKind::SED ? 0 : 2;
        }
    }
    return cfg;
}

nlohmann::json ArchConfig::to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind);
    j["d"] = d;
    j["h"] = h;
    j["w"] = w;
    j["c"] = c;
    j["n_down"] = n_down;
    j["n_up"] = n_up;
    j["n_link"] = n_link;
    j["head_hidden"] = head_hidden;
    j["head_out"] = head_out;
    j["seed"] = seed;
    return j;
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
    ArchConfig cfg;
    cfg.kind = arch_from_string(j.at("kind").get<std::string>());
    cfg.d = j.at("d").get<std::vector<int>>();
    cfg.h = j.at("h").get<std::vector<int>>();
    cfg.w = j.at("w").get<std::vector<int>>();
    cfg.c = j.at("c").get<std::vector<int>>();
    cfg.n_down = j.at("n_down").get<int>();
    cfg.n_up = j.value("n_up", 0);
    cfg.n_link = j.value("n_link", 0);
    cfg.head_hidden = j.value("head_hidden", 128);
    cfg.head_out = j.value("head_out", 12);
    cfg.seed = j.value("seed", uint64_t(0));
    cfg.validate();
    return cfg;
}

}  // namespace voxalign::nets
