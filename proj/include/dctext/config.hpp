#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dctext/errors.hpp"
#include "dctext/io.hpp"
#include "dctext/layout.hpp"
#include "dctext/model.hpp"
#include "dctext/pipeline.hpp"

namespace dctext {

using json = nlohmann::json;

struct TextualPromptCfg {
    std::vector<int> tokens;
    BBox bbox;
};

struct RunConfig {
    uint64_t seed = 0;
    int grid_h = 16, grid_w = 16, channels = 1;
    std::vector<int> global_tokens;
    std::vector<TextualPromptCfg> textual;
    int T = 24, T_init = 0, T_focus = 0, T_expn = 0;
    double alpha = 0.7;
    double guidance = 5.0;
    std::string model_checkpoint;  // filesystem path or "random:<seed>"
    std::string output_dir;
    std::vector<std::string> snapshot_stages;
};

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& known,
                                const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

inline const json& require(const json& obj, const std::string& key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError("missing key '" + key + "' in " + where);
    return *it;
}

template <typename T>
T as(const json& j, const std::string& what) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for " + what);
    }
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    detail::reject_unknown_keys(j, {"seed", "grid", "prompts", "schedule", "model", "outputs"},
                                "config root");
    RunConfig c;
    c.seed = detail::as<uint64_t>(detail::require(j, "seed", "config root"), "seed");

    const json& grid = detail::require(j, "grid", "config root");
    detail::reject_unknown_keys(grid, {"h", "w", "channels"}, "grid");
    c.grid_h = detail::as<int>(detail::require(grid, "h", "grid"), "grid.h");
    c.grid_w = detail::as<int>(detail::require(grid, "w", "grid"), "grid.w");
    c.channels = grid.contains("channels") ? detail::as<int>(grid["channels"], "grid.channels") : 1;

    const json& prompts = detail::require(j, "prompts", "config root");
    detail::reject_unknown_keys(prompts, {"global_tokens", "textual"}, "prompts");
    c.global_tokens = detail::as<std::vector<int>>(
        detail::require(prompts, "global_tokens", "prompts"), "prompts.global_tokens");
    const json& textual = detail::require(prompts, "textual", "prompts");
    if (!textual.is_array()) throw ConfigError("prompts.textual must be an array");
    for (const json& tp : textual) {
        detail::reject_unknown_keys(tp, {"tokens", "bbox"}, "prompts.textual[]");
        TextualPromptCfg t;
        t.tokens = detail::as<std::vector<int>>(detail::require(tp, "tokens", "textual prompt"),
                                                "textual tokens");
        const auto box = detail::as<std::vector<double>>(
            detail::require(tp, "bbox", "textual prompt"), "textual bbox");
        if (box.size() != 4) throw ConfigError("bbox must be [x1,y1,x2,y2]");
        t.bbox = BBox{box[0], box[1], box[2], box[3]};
        c.textual.push_back(std::move(t));
    }

    const json& sched = detail::require(j, "schedule", "config root");
    detail::reject_unknown_keys(sched, {"T", "T_init", "T_focus", "T_expn", "alpha", "guidance"},
                                "schedule");
    c.T = detail::as<int>(detail::require(sched, "T", "schedule"), "schedule.T");
    c.T_init = detail::as<int>(detail::require(sched, "T_init", "schedule"), "schedule.T_init");
    c.T_focus = detail::as<int>(detail::require(sched, "T_focus", "schedule"), "schedule.T_focus");
    c.T_expn = detail::as<int>(detail::require(sched, "T_expn", "schedule"), "schedule.T_expn");
    c.alpha = sched.contains("alpha") ? detail::as<double>(sched["alpha"], "schedule.alpha") : 0.7;
    c.guidance =
        sched.contains("guidance") ? detail::as<double>(sched["guidance"], "schedule.guidance") : 5.0;

    const json& model = detail::require(j, "model", "config root");
    detail::reject_unknown_keys(model, {"checkpoint"}, "model");
    c.model_checkpoint = detail::as<std::string>(detail::require(model, "checkpoint", "model"),
                                                 "model.checkpoint");

    const json& outputs = detail::require(j, "outputs", "config root");
    detail::reject_unknown_keys(outputs, {"dir", "snapshot_stages"}, "outputs");
    c.output_dir = detail::as<std::string>(detail::require(outputs, "dir", "outputs"), "outputs.dir");
    if (outputs.contains("snapshot_stages")) {
        c.snapshot_stages =
            detail::as<std::vector<std::string>>(outputs["snapshot_stages"], "snapshot_stages");
        for (const auto& s : c.snapshot_stages)
            if (s != "init" && s != "focus" && s != "expn" && s != "global")
                throw ConfigError("unknown snapshot stage '" + s + "'");
    }
    return c;
}

inline RunConfig parse_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("JSON parse failure: ") + e.what());
    }
    return parse_config(j);
}

inline json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["grid"] = {{"h", c.grid_h}, {"w", c.grid_w}, {"channels", c.channels}};
    json textual = json::array();
    for (const auto& t : c.textual)
        textual.push_back({{"tokens", t.tokens},
                           {"bbox", {t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2}}});
    j["prompts"] = {{"global_tokens", c.global_tokens}, {"textual", textual}};
    j["schedule"] = {{"T", c.T},         {"T_init", c.T_init},   {"T_focus", c.T_focus},
                     {"T_expn", c.T_expn}, {"alpha", c.alpha},     {"guidance", c.guidance}};
    j["model"] = {{"checkpoint", c.model_checkpoint}};
    j["outputs"] = {{"dir", c.output_dir}, {"snapshot_stages", c.snapshot_stages}};
    return j;
}

// Dotted-path override "schedule.T_init=0". The path must name an existing
// key; the value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& j, const std::string& spec) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like KEY=VALUE: " + spec);
    const std::string path = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);

    json* node = &j;
    size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        const size_t dot = path.find('.', start);
        parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i]))
            throw ConfigError("override path not found: " + path);
        node = &(*node)[parts[i]];
    }
    if (!node->is_object() || !node->contains(parts.back()))
        throw ConfigError("override path not found: " + path);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;
    }
    (*node)[parts.back()] = parsed;
}

inline PipelineInput config_to_pipeline_input(const RunConfig& c) {
    PipelineInput in;
    in.seed = c.seed;
    in.grid_h = c.grid_h;
    in.grid_w = c.grid_w;
    in.channels = c.channels;
    for (const auto& t : c.textual) {
        in.textual_tokens.push_back(t.tokens);
        in.boxes.push_back(t.bbox);
    }
    in.global_tokens = c.global_tokens;
    in.sched = make_schedule(c.T, c.T_init, c.T_focus, c.T_expn, c.alpha, c.guidance);
    in.opts.snapshot_stages.insert(c.snapshot_stages.begin(), c.snapshot_stages.end());
    return in;
}

// Builds the model a config names: either a checkpoint file or a fresh
// "random:<seed>" model sized to the config's grid and prompts.
inline ToyDenoiser model_from_config(const RunConfig& c, const ToyDenoiser* preloaded = nullptr) {
    if (preloaded) return *preloaded;
    const std::string& spec = c.model_checkpoint;
    if (spec.rfind("random:", 0) == 0) {
        uint64_t seed = 0;
        try {
            seed = std::stoull(spec.substr(7));
        } catch (const std::exception&) {
            throw ConfigError("bad random model spec '" + spec + "'");
        }
        int max_id = 0, max_len = 1;
        auto scan = [&](const std::vector<int>& toks) {
            max_len = std::max(max_len, static_cast<int>(toks.size()));
            for (int t : toks) max_id = std::max(max_id, t);
        };
        scan(c.global_tokens);
        for (const auto& t : c.textual) scan(t.tokens);
        DenoiserConfig mc;
        mc.channels = c.channels;
        mc.grid_h = std::max(mc.grid_h, c.grid_h);
        mc.grid_w = std::max(mc.grid_w, c.grid_w);
        mc.vocab = std::max(mc.vocab, max_id + 1);
        mc.max_text_len = std::max(mc.max_text_len, max_len);
        return ToyDenoiser::random_init(mc, seed);
    }
    return load_checkpoint(spec);
}

}  // namespace dctext
