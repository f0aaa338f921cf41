#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dctext/config.hpp"
#include "dctext/errors.hpp"
#include "dctext/masks.hpp"
#include "dctext/pipeline.hpp"
#include "dctext/synth.hpp"

namespace dctext {

enum class SweepKind { Drop, TInit, TFocus, TExpn };

inline SweepKind parse_sweep(const std::string& s) {
    if (s == "drop") return SweepKind::Drop;
    if (s == "T_init") return SweepKind::TInit;
    if (s == "T_focus") return SweepKind::TFocus;
    if (s == "T_expn") return SweepKind::TExpn;
    throw InvalidArgument("unknown sweep '" + s + "' (expected drop|T_init|T_focus|T_expn)");
}

struct AblateRow {
    std::string variant;
    int T_init = 0, T_focus = 0, T_expn = 0;
    std::string drop;  // empty or the dropped flow's name
    double region_accuracy = 0.0;
    double flops_total = 0.0;
};

inline int worker_cap() {
    if (const char* env = std::getenv("MASKCTL_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

// Ground-truth glyph specs implied by a config that follows the synth token
// convention (first textual token = glyph id).
inline std::vector<GlyphSpec> specs_from_config(const RunConfig& c) {
    std::vector<GlyphSpec> specs;
    for (const auto& t : c.textual) {
        if (t.tokens.empty() || t.tokens[0] < 0 || t.tokens[0] >= glyph_count())
            throw InvalidArgument("textual prompt does not start with a glyph id");
        specs.push_back({t.tokens[0], rasterize_bbox(t.bbox, c.grid_h, c.grid_w)});
    }
    return specs;
}

// Runs every variant of the requested sweep with the config's seed shared
// across variants and reports accuracy plus total FLOPs per row. Variants run
// in parallel worker slots capped by MASKCTL_THREADS.
inline std::vector<AblateRow> ablate(const ToyDenoiser& model, const RunConfig& base,
                                     SweepKind kind, const std::vector<int>& values = {}) {
    struct Variant {
        AblateRow row;
        PipelineInput input;
    };
    std::vector<Variant> variants;

    auto base_input = [&](int t_init, int t_focus, int t_expn) {
        RunConfig c = base;
        c.T_init = t_init;
        c.T_focus = t_focus;
        c.T_expn = t_expn;
        return config_to_pipeline_input(c);
    };

    switch (kind) {
        case SweepKind::Drop: {
            Variant full;
            full.row = {"full", base.T_init, base.T_focus, base.T_expn, "", 0, 0};
            full.input = base_input(base.T_init, base.T_focus, base.T_expn);
            variants.push_back(std::move(full));
            for (PartialMask pm : {PartialMask::RcToRi, PartialMask::PiToRc, PartialMask::PgToRi,
                                   PartialMask::PiToPg}) {
                Variant v;
                v.row = {std::string("wo_") + to_string(pm), base.T_init, base.T_focus,
                         base.T_expn, to_string(pm), 0, 0};
                v.input = base_input(base.T_init, base.T_focus, base.T_expn);
                v.input.opts.drop = {pm};
                variants.push_back(std::move(v));
            }
            break;
        }
        case SweepKind::TInit: {
            const std::vector<int> vals = values.empty() ? std::vector<int>{0, 1, 2} : values;
            for (int v : vals) {
                Variant var;
                var.row = {"T_init=" + std::to_string(v), v, base.T_focus, base.T_expn, "", 0, 0};
                var.input = base_input(v, base.T_focus, base.T_expn);
                variants.push_back(std::move(var));
            }
            break;
        }
        case SweepKind::TFocus: {
            const std::vector<int> vals = values.empty() ? std::vector<int>{0, 1, 2, 3, 4} : values;
            for (int v : vals) {
                Variant var;
                var.row = {"T_focus=" + std::to_string(v), base.T_init, v, base.T_expn, "", 0, 0};
                var.input = base_input(base.T_init, v, base.T_expn);
                variants.push_back(std::move(var));
            }
            break;
        }
        case SweepKind::TExpn: {
            // T_focus shrinks as T_expn grows so the masked-stage total stays fixed
            const int budget = base.T_focus + base.T_expn;
            const std::vector<int> vals = values.empty() ? std::vector<int>{0, 1, 2, 3, 4} : values;
            for (int v : vals) {
                if (v < 0 || v > budget)
                    throw InvalidArgument("T_expn value " + std::to_string(v) +
                                          " exceeds the fixed masked-stage budget " +
                                          std::to_string(budget));
                Variant var;
                var.row = {"T_expn=" + std::to_string(v), base.T_init, budget - v, v, "", 0, 0};
                var.input = base_input(base.T_init, budget - v, v);
                variants.push_back(std::move(var));
            }
            break;
        }
    }

    const std::vector<GlyphSpec> specs = specs_from_config(base);

    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto work = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= variants.size()) return;
            try {
                const RunResult r = run_dctext(model, variants[i].input);
                variants[i].row.region_accuracy = region_accuracy(r.final, specs);
                variants[i].row.flops_total = r.trace.total_flops();
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    const int workers = std::min<int>(worker_cap(), static_cast<int>(variants.size()));
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);

    std::vector<AblateRow> rows;
    rows.reserve(variants.size());
    for (auto& v : variants) rows.push_back(std::move(v.row));
    return rows;
}

inline std::string ablate_csv(const std::vector<AblateRow>& rows) {
    std::ostringstream os;
    os << "variant,T_init,T_focus,T_expn,drop,region_accuracy,flops_total\n";
    for (const auto& r : rows) {
        os << r.variant << ',' << r.T_init << ',' << r.T_focus << ',' << r.T_expn << ',' << r.drop
           << ',';
        os.precision(6);
        os << std::fixed << r.region_accuracy << ',';
        os.precision(0);
        os << r.flops_total << '\n';
    }
    return os.str();
}

}  // namespace dctext
