#include "raddpo/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "raddpo/common.hpp"
#include "raddpo/datagen.hpp"
#include "raddpo/eval.hpp"
#include "raddpo/model.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/train.hpp"
#include "raddpo/vocab.hpp"

namespace raddpo::cli {

using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config plumbing

template <class T>
T get_or(const json& j, const char* key, T def) {
    if (!j.contains(key)) return def;
    return j.at(key).get<T>();
}

std::string require_str(const json& j, const char* key, const char* op) {
    if (!j.contains(key) || !j.at(key).is_string())
        throw ConfigError(std::string(op) + ": config needs a string \"" + key + "\"");
    return j.at(key).get<std::string>();
}

json parse_config_text(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config " + origin + ": " + e.what());
    }
}

json load_config_file(const std::string& path) {
    return parse_config_text(read_text_file(path), path);
}

std::string config_hash(const json& cfg) { return hex64(fnv1a64(cfg.dump())); }

// Replace a trailing extension so sibling artifacts sit next to the primary.
std::string sibling(std::string path, const std::string& strip, const std::string& add) {
    if (path.size() > strip.size() && path.ends_with(strip))
        path.resize(path.size() - strip.size());
    return path + add;
}

std::string oracle_path_for(const json& cfg, const std::string& out) {
    return get_or<std::string>(cfg, "oracle_out", sibling(out, ".jsonl", ".oracle.jsonl"));
}
std::string trace_path_for(const std::string& out) {
    return sibling(out, ".bin", ".trace.jsonl");
}
std::string records_path_for(const std::string& out) {
    return sibling(out, ".txt", ".records.jsonl");
}

void ensure_parent_dir(const std::string& path) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

// ---------------------------------------------------------------------------
// Provenance sidecars

struct RunOutputs {
    std::map<std::string, std::string> inputs; // path -> content hash
    std::vector<std::string> outputs;          // first entry is the primary artifact
};

std::string prov_path_for(const std::string& primary_out) { return primary_out + ".prov.json"; }

void write_provenance(const std::string& op, const json& cfg, const RunOutputs& ro) {
    json outputs = json::object();
    for (const auto& p : ro.outputs) outputs[p] = hash_file_hex(p);
    json prov{{"format", "raddpo.prov"}, {"version", 1},
              {"tool_version", kToolVersion}, {"op", op},
              {"config_hash", config_hash(cfg)},
              {"seed", get_or<uint64_t>(cfg, "seed", 0)},
              {"inputs", json(ro.inputs)},
              {"outputs", outputs}};
    std::ofstream f(prov_path_for(ro.outputs.front()), std::ios::binary);
    if (!f) throw MissingInputError("cannot write provenance beside " + ro.outputs.front());
    f << prov.dump(2) << '\n';
}

// A step is current when its provenance sidecar matches the present config
// and every recorded input and output file still hashes the same.
bool step_is_current(const json& cfg, const std::string& out) {
    const std::string pp = prov_path_for(out);
    if (!std::filesystem::exists(pp)) return false;
    json prov;
    try {
        prov = load_config_file(pp);
        if (prov.at("config_hash") != config_hash(cfg)) return false;
        for (const auto& [path, hash] : prov.at("inputs").items()) {
            if (!std::filesystem::exists(path)) return false;
            if (hash_file_hex(path) != hash.get<std::string>()) return false;
        }
        for (const auto& [path, hash] : prov.at("outputs").items()) {
            if (!std::filesystem::exists(path)) return false;
            if (hash_file_hex(path) != hash.get<std::string>()) return false;
        }
    } catch (const std::exception&) {
        return false; // unreadable provenance: treat the step as stale
    }
    return true;
}

// ---------------------------------------------------------------------------
// Vector-graphics emission (single-series bar chart)

void write_bar_svg(const std::string& path, const std::string& title,
                   const std::vector<std::pair<std::string, double>>& bars) {
    const int bar_w = 64, gap = 24, h = 320, base = 260, scale = 200;
    const int w = gap + static_cast<int>(bars.size()) * (bar_w + gap);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot write figure: " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << std::max(w, 320)
      << "\" height=\"" << h << "\">\n";
    f << "  <text x=\"12\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << title
      << "</text>\n";
    f << "  <line x1=\"8\" y1=\"" << base << "\" x2=\"" << std::max(w, 320) - 8 << "\" y2=\""
      << base << "\" stroke=\"#444\"/>\n";
    int x = gap;
    for (const auto& [label, value] : bars) {
        const double clamped = std::min(std::max(value, 0.0), 1.0);
        const int bh = static_cast<int>(clamped * scale);
        f << "  <rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"" << bar_w
          << "\" height=\"" << bh << "\" fill=\"#4878a8\"/>\n";
        char val[32];
        std::snprintf(val, sizeof(val), "%.3f", value);
        f << "  <text x=\"" << x << "\" y=\"" << base - bh - 6
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << val << "</text>\n";
        f << "  <text x=\"" << x << "\" y=\"" << base + 16
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << label << "</text>\n";
        x += bar_w + gap;
    }
    f << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Subcommand bodies (shared by the CLI and the manifest runner)

RunOutputs cmd_build_sids(const json& cfg, const std::string& out) {
    const auto n_items = get_or<size_t>(cfg, "n_items", 600);
    const auto dim = get_or<size_t>(cfg, "dim", 16);
    const auto branching = get_or<std::vector<size_t>>(cfg, "branching", {8, 8, 8});
    const auto sizes = get_or<std::vector<size_t>>(cfg, "level_sizes", branching);
    const auto seed = get_or<uint64_t>(cfg, "seed", 0);
    const auto iters = get_or<size_t>(cfg, "kmeans_iters", 50);

    auto embeddings = datagen::synth_embeddings(n_items, dim, branching, seed);
    auto cb = sid::rq_kmeans_fit(embeddings, sizes, seed, iters);
    std::vector<sid::SemanticId> sids;
    sids.reserve(embeddings.size());
    for (const auto& e : embeddings) sids.push_back(sid::encode(e, cb));
    auto catalog = sid::Catalog::from_items(std::move(sids), sizes);

    ensure_parent_dir(out);
    sid::save_catalog(catalog, out);
    const std::string cb_path =
        get_or<std::string>(cfg, "codebooks_out", out + ".codebooks.json");
    sid::save_codebooks(cb, cb_path);
    return {{}, {out, cb_path}};
}

RunOutputs cmd_gen_data(const json& cfg, const std::string& out) {
    datagen::GenConfig gc;
    gc.sessions = get_or<size_t>(cfg, "sessions", gc.sessions);
    gc.n_queries = get_or<size_t>(cfg, "n_queries", gc.n_queries);
    gc.n_negatives = get_or<size_t>(cfg, "n_negatives", gc.n_negatives);
    gc.pseudo_negative_rate = get_or<double>(cfg, "pseudo_negative_rate", gc.pseudo_negative_rate);
    gc.prefix_share_targets =
        get_or<std::vector<double>>(cfg, "prefix_share_targets", gc.prefix_share_targets);
    gc.min_positives = get_or<size_t>(cfg, "min_positives", gc.min_positives);
    gc.max_positives = get_or<size_t>(cfg, "max_positives", gc.max_positives);
    gc.p_ordered = get_or<double>(cfg, "p_ordered", gc.p_ordered);
    gc.history_items = get_or<size_t>(cfg, "history_items", gc.history_items);
    gc.max_history_tokens = get_or<size_t>(cfg, "max_history_tokens", gc.max_history_tokens);
    gc.exposed_fraction = get_or<double>(cfg, "exposed_fraction", gc.exposed_fraction);
    gc.relevant_take = get_or<double>(cfg, "relevant_take", gc.relevant_take);
    gc.noise_items = get_or<size_t>(cfg, "noise_items", gc.noise_items);
    gc.seed = get_or<uint64_t>(cfg, "seed", gc.seed);
    if (cfg.contains("map_seed")) gc.map_seed = cfg.at("map_seed").get<uint64_t>();

    const std::string catalog_path = require_str(cfg, "catalog", "gen-data");
    auto catalog = sid::load_catalog(catalog_path);
    const std::string catalog_hash = hash_file_hex(catalog_path);
    Vocab vocab{catalog.sizes(), get_or<size_t>(cfg, "n_query_tokens", gc.n_queries)};

    auto corpus = datagen::generate(gc, catalog, vocab);
    const std::string oracle_out = oracle_path_for(cfg, out);
    ensure_parent_dir(out);
    datagen::save_corpus(corpus, gc, vocab, out, oracle_out, catalog_hash);
    return {{{catalog_path, catalog_hash}}, {out, oracle_out}};
}

train::TrainConfig train_config_from(const json& cfg, size_t corpus_negatives) {
    train::TrainConfig tc;
    const std::string stage = require_str(cfg, "stage", "train");
    if (stage == "sft") tc.stage = train::TrainConfig::Stage::sft;
    else if (stage == "align") tc.stage = train::TrainConfig::Stage::align;
    else throw ConfigError("train: stage must be \"sft\" or \"align\"");
    tc.method = train::parse_method(get_or<std::string>(cfg, "method", "rad_dpo"));
    tc.lr = get_or<double>(cfg, "lr", tc.lr);
    tc.batch_size = get_or<size_t>(cfg, "batch_size", tc.batch_size);
    tc.steps = get_or<size_t>(cfg, "steps", tc.steps);
    tc.seed = get_or<uint64_t>(cfg, "seed", tc.seed);
    tc.clip_norm = get_or<double>(cfg, "clip_norm", tc.clip_norm);
    tc.checkpoint_every = get_or<size_t>(cfg, "checkpoint_every", tc.checkpoint_every);
    tc.stats_capacity = get_or<size_t>(cfg, "stats_capacity", tc.stats_capacity);
    tc.stats_refresh = get_or<size_t>(cfg, "stats_refresh", tc.stats_refresh);

    const json loss = get_or<json>(cfg, "loss", json::object());
    tc.loss.beta = get_or<double>(loss, "beta", tc.loss.beta);
    tc.loss.lambda = get_or<double>(loss, "lambda", tc.loss.lambda);
    tc.loss.gamma = get_or<double>(loss, "gamma", tc.loss.gamma);
    tc.loss.enable_tlgd = get_or<bool>(loss, "enable_tlgd", tc.loss.enable_tlgd);
    tc.loss.enable_rdrw = get_or<bool>(loss, "enable_rdrw", tc.loss.enable_rdrw);
    tc.loss.enable_multilabel_sft =
        get_or<bool>(loss, "enable_multilabel_sft", tc.loss.enable_multilabel_sft);
    tc.loss.sft_weight = get_or<double>(loss, "sft_weight", tc.loss.sft_weight);

    // The per-session negative count is a property of the corpus.
    tc.loss.n_negatives = corpus_negatives;
    if (loss.contains("n_negatives") &&
        loss.at("n_negatives").get<size_t>() != corpus_negatives) {
        throw ConfigError("train: loss.n_negatives disagrees with the corpus");
    }
    return tc;
}

RunOutputs cmd_train(const json& cfg, const std::string& out) {
    const std::string corpus_path = require_str(cfg, "corpus", "train");
    Vocab vocab;
    std::string catalog_hash;
    auto sessions = datagen::load_corpus(corpus_path, &vocab, &catalog_hash);
    if (sessions.empty()) throw ConfigError("train: corpus has no sessions");
    auto tc = train_config_from(cfg, sessions.front().negatives.size());

    RunOutputs ro;
    ro.inputs[corpus_path] = hash_file_hex(corpus_path);
    const std::string trace_path = trace_path_for(out);
    ensure_parent_dir(out);
    std::ofstream trace(trace_path, std::ios::binary);
    if (!trace) throw MissingInputError("train: cannot write trace: " + trace_path);
    std::string ckpt_dir;
    if (tc.checkpoint_every > 0) {
        ckpt_dir = out + ".ckpts";
        std::filesystem::create_directories(ckpt_dir);
    }

    train::TrainResult res;
    if (tc.stage == train::TrainConfig::Stage::sft) {
        const json mj = get_or<json>(cfg, "model", json::object());
        model::ModelConfig mc;
        mc.vocab_size = vocab.size();
        mc.depth = get_or<size_t>(mj, "depth", mc.depth);
        mc.d_model = get_or<size_t>(mj, "d_model", mc.d_model);
        mc.n_heads = get_or<size_t>(mj, "n_heads", mc.n_heads);
        mc.max_seq_len = get_or<size_t>(mj, "max_seq_len", mc.max_seq_len);
        mc.seed = get_or<uint64_t>(mj, "seed", tc.seed);
        res = train::run_sft(tc, sessions, vocab, mc, &trace, ckpt_dir);
    } else {
        const std::string init_path = require_str(cfg, "init", "train");
        auto init = model::load_checkpoint(init_path);
        if (init.cfg.vocab_size != vocab.size())
            throw ConfigError("train: init checkpoint vocab does not match the corpus");
        ro.inputs[init_path] = hash_file_hex(init_path);
        res = train::run_alignment(tc, sessions, vocab, init, &trace, ckpt_dir);
    }
    model::save_checkpoint(res.final_model, out);
    ro.outputs = {out, trace_path};
    return ro;
}

RunOutputs cmd_eval(const json& cfg, const std::string& out, bool plot) {
    const std::string ckpt_path = require_str(cfg, "checkpoint", "eval");
    const std::string corpus_path = require_str(cfg, "corpus", "eval");
    const std::string catalog_path = require_str(cfg, "catalog", "eval");
    const std::string oracle_path =
        get_or<std::string>(cfg, "oracle", sibling(corpus_path, ".jsonl", ".oracle.jsonl"));

    Vocab vocab;
    std::string corpus_catalog_hash;
    auto sessions = datagen::load_corpus(corpus_path, &vocab, &corpus_catalog_hash);
    auto oracle = datagen::load_oracle(oracle_path);
    auto catalog = sid::load_catalog(catalog_path);
    const std::string catalog_hash = hash_file_hex(catalog_path);
    if (catalog_hash != corpus_catalog_hash)
        throw HashMismatchError("eval: corpus was generated from a different catalog (" +
                                corpus_catalog_hash + " vs " + catalog_hash + ")");

    auto m = model::load_checkpoint(ckpt_path);
    if (m.cfg.vocab_size != vocab.size())
        throw ConfigError("eval: checkpoint vocab does not match the corpus");

    eval::EvalConfig ec;
    ec.sid_ks = get_or<std::vector<size_t>>(cfg, "sid_ks", ec.sid_ks);
    ec.item_ks = get_or<std::vector<size_t>>(cfg, "item_ks", ec.item_ks);
    ec.width = get_or<size_t>(cfg, "width", ec.width);
    ec.constrained = get_or<bool>(cfg, "constrained", ec.constrained);
    ec.method = get_or<std::string>(cfg, "method", ec.method);
    ec.seeds = get_or<std::vector<uint64_t>>(cfg, "seeds", ec.seeds);
    ec.corpus_hash = hash_file_hex(corpus_path);

    auto rep = eval::evaluate(m, vocab, sessions, oracle, catalog, ec);
    ensure_parent_dir(out);
    eval::save_report(rep, out);

    RunOutputs ro;
    ro.inputs = {{ckpt_path, hash_file_hex(ckpt_path)},
                 {corpus_path, ec.corpus_hash},
                 {oracle_path, hash_file_hex(oracle_path)},
                 {catalog_path, catalog_hash}};
    ro.outputs = {out};
    if (plot) {
        std::vector<std::pair<std::string, double>> bars;
        for (size_t i = 0; i < rep.sid_ks.size(); ++i)
            bars.emplace_back("R@" + std::to_string(rep.sid_ks[i]), rep.sid_recall[i]);
        bars.emplace_back("MRR", rep.sid_mrr);
        bars.emplace_back("halluc", rep.hallucination_rate);
        const std::string svg = sibling(out, ".json", ".svg");
        write_bar_svg(svg, "sid-level metrics: " + rep.method, bars);
        ro.outputs.push_back(svg);
    }
    return ro;
}

RunOutputs cmd_compare(const json& cfg, const std::string& out, bool plot) {
    if (!cfg.contains("reports") || !cfg.at("reports").is_array())
        throw ConfigError("compare: config needs a \"reports\" array");
    const std::string baseline = require_str(cfg, "baseline", "compare");

    RunOutputs ro;
    std::vector<eval::EvalReport> reports;
    for (const auto& rp : cfg.at("reports")) {
        const std::string path = rp.get<std::string>();
        reports.push_back(eval::load_report(path));
        ro.inputs[path] = hash_file_hex(path);
    }
    auto res = eval::compare(reports, baseline);

    ensure_parent_dir(out);
    std::ofstream table(out, std::ios::binary);
    if (!table) throw MissingInputError("compare: cannot write table: " + out);
    table << res.table;
    const std::string records_path = records_path_for(out);
    std::ofstream records(records_path, std::ios::binary);
    for (const auto& line : res.records) records << line << '\n';
    std::cout << res.table;

    ro.outputs = {out, records_path};
    if (plot) {
        std::vector<std::pair<std::string, double>> recall_bars, halluc_bars;
        const std::string k0 = std::to_string(reports.front().sid_ks.front());
        for (const auto& r : reports) {
            recall_bars.emplace_back(r.method, r.sid_recall.front());
            halluc_bars.emplace_back(r.method, r.hallucination_rate);
        }
        const std::string rsvg = sibling(out, ".txt", ".recall.svg");
        const std::string hsvg = sibling(out, ".txt", ".halluc.svg");
        write_bar_svg(rsvg, "sid recall@" + k0 + " by method", recall_bars);
        write_bar_svg(hsvg, "hallucination rate by method", halluc_bars);
        ro.outputs.push_back(rsvg);
        ro.outputs.push_back(hsvg);
    }
    return ro;
}

// ---------------------------------------------------------------------------
// Manifest runner

struct Step {
    std::string name;
    std::string op;
    std::string out;
    json cfg;
};

std::vector<std::string> step_input_paths(const Step& s) {
    std::vector<std::string> in;
    for (const char* key : {"catalog", "corpus", "init", "checkpoint", "oracle"})
        if (s.cfg.contains(key)) in.push_back(s.cfg.at(key).get<std::string>());
    if (s.cfg.contains("reports"))
        for (const auto& r : s.cfg.at("reports")) in.push_back(r.get<std::string>());
    return in;
}

std::vector<std::string> step_output_paths(const Step& s) {
    std::vector<std::string> out{s.out};
    if (s.op == "build-sids")
        out.push_back(get_or<std::string>(s.cfg, "codebooks_out", s.out + ".codebooks.json"));
    else if (s.op == "gen-data")
        out.push_back(oracle_path_for(s.cfg, s.out));
    else if (s.op == "train")
        out.push_back(trace_path_for(s.out));
    else if (s.op == "compare")
        out.push_back(records_path_for(s.out));
    return out;
}

RunOutputs dispatch_step(const Step& s) {
    if (s.op == "build-sids") return cmd_build_sids(s.cfg, s.out);
    if (s.op == "gen-data") return cmd_gen_data(s.cfg, s.out);
    if (s.op == "train") return cmd_train(s.cfg, s.out);
    if (s.op == "eval") return cmd_eval(s.cfg, s.out, false);
    if (s.op == "compare") return cmd_compare(s.cfg, s.out, false);
    throw ConfigError("manifest: unknown op: " + s.op);
}

void run_manifest(const std::string& manifest_path, std::optional<uint64_t> seed_override) {
    json m = load_config_file(manifest_path);
    if (get_or<std::string>(m, "format", "raddpo.manifest") != "raddpo.manifest")
        throw ConfigError("manifest: unrecognized format");
    if (!m.contains("steps") || !m.at("steps").is_array() || m.at("steps").empty())
        throw ConfigError("manifest: needs a non-empty \"steps\" array");

    std::optional<uint64_t> global_seed = seed_override;
    if (!global_seed && m.contains("seed")) global_seed = m.at("seed").get<uint64_t>();

    std::vector<Step> steps;
    for (const auto& sj : m.at("steps")) {
        Step s;
        s.op = get_or<std::string>(sj, "op", "");
        // Pipeline aliases for the two train stages.
        json cfg = sj.contains("config_ref")
                       ? load_config_file(sj.at("config_ref").get<std::string>())
                       : get_or<json>(sj, "config", json::object());
        if (s.op == "train-sft") {
            s.op = "train";
            cfg["stage"] = "sft";
        } else if (s.op == "train-align") {
            s.op = "train";
            cfg["stage"] = "align";
        }
        s.name = get_or<std::string>(sj, "name", s.op);
        if (!sj.contains("out")) throw ConfigError("manifest: step " + s.name + " needs \"out\"");
        s.out = sj.at("out").get<std::string>();
        if (global_seed && !cfg.contains("seed")) cfg["seed"] = *global_seed;
        s.cfg = std::move(cfg);
        steps.push_back(std::move(s));
    }

    // Referenced inputs must already exist or be produced by an earlier step.
    std::set<std::string> produced;
    for (const auto& s : steps) {
        for (const auto& in : step_input_paths(s)) {
            if (!produced.count(in) && !std::filesystem::exists(in))
                throw ConfigError("manifest: step " + s.name + " references " + in +
                                  ", which no earlier step produces");
        }
        for (const auto& out : step_output_paths(s)) produced.insert(out);
    }

    for (const auto& s : steps) {
        if (step_is_current(s.cfg, s.out)) {
            std::cout << "[manifest] " << s.name << ": up to date, skipping\n";
            continue;
        }
        std::cout << "[manifest] " << s.name << ": running " << s.op << " -> " << s.out
                  << std::endl;
        auto ro = dispatch_step(s);
        write_provenance(s.op, s.cfg, ro);
    }
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Preference-aligned generative retrieval over semantic IDs"};
    app.require_subcommand(1);

    std::string config_path, out, method, manifest_path;
    uint64_t seed = 0;
    size_t beam_width = 0;
    bool no_tlgd = false, no_rdrw = false, no_mlsft = false, constrained = false, plot = false;

    auto* sc_build = app.add_subcommand("build-sids", "Fit residual K-means codebooks and "
                                                      "write the SID catalog");
    auto* sc_gen = app.add_subcommand("gen-data", "Generate a synthetic session corpus");
    auto* sc_train = app.add_subcommand("train", "Run SFT or preference alignment");
    auto* sc_eval = app.add_subcommand("eval", "Decode and score a checkpoint");
    auto* sc_cmp = app.add_subcommand("compare", "Render a method comparison table");
    auto* sc_man = app.add_subcommand("run-manifest", "Execute a multi-step experiment manifest");

    for (auto* sc : {sc_build, sc_gen, sc_train, sc_eval, sc_cmp}) {
        sc->add_option("--config", config_path, "JSON config file")->required();
        sc->add_option("--out", out, "primary output artifact")->required();
        sc->add_option("--seed", seed, "override the config seed");
    }
    sc_train->add_option("--method", method, "rad_dpo | dpo | simpo | sft_only");
    sc_train->add_flag("--no-tlgd", no_tlgd, "disable token-level gradient detachment");
    sc_train->add_flag("--no-rdrw", no_rdrw, "disable dynamic reward weighting");
    sc_train->add_flag("--no-mlsft", no_mlsft, "disable the multi-label SFT term");
    sc_eval->add_option("--beam-width", beam_width, "override the beam width");
    sc_eval->add_flag("--constrained", constrained, "trie-constrained decoding");
    sc_eval->add_flag("--plot", plot, "emit metric bar charts as SVG");
    sc_cmp->add_flag("--plot", plot, "emit metric bar charts as SVG");
    sc_man->add_option("manifest", manifest_path, "manifest file")->type_name("FILE");
    sc_man->add_option("--config", config_path, "manifest file (alias)");
    sc_man->add_option("--seed", seed, "override the manifest seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(sc_man)) {
            std::string path = !manifest_path.empty() ? manifest_path : config_path;
            if (path.empty()) throw ConfigError("run-manifest: pass a manifest file");
            std::optional<uint64_t> seed_override;
            if (sc_man->count("--seed")) seed_override = seed;
            run_manifest(path, seed_override);
            return 0;
        }

        json cfg = load_config_file(config_path);
        const auto* sub = app.get_subcommands().front();
        if (sub->count("--seed")) cfg["seed"] = seed;

        RunOutputs ro;
        std::string op;
        if (app.got_subcommand(sc_build)) {
            op = "build-sids";
            ro = cmd_build_sids(cfg, out);
        } else if (app.got_subcommand(sc_gen)) {
            op = "gen-data";
            ro = cmd_gen_data(cfg, out);
        } else if (app.got_subcommand(sc_train)) {
            op = "train";
            if (!method.empty()) cfg["method"] = method;
            if (!cfg.contains("loss")) cfg["loss"] = json::object();
            if (no_tlgd) cfg["loss"]["enable_tlgd"] = false;
            if (no_rdrw) cfg["loss"]["enable_rdrw"] = false;
            if (no_mlsft) cfg["loss"]["enable_multilabel_sft"] = false;
            ro = cmd_train(cfg, out);
        } else if (app.got_subcommand(sc_eval)) {
            op = "eval";
            if (sc_eval->count("--beam-width")) cfg["width"] = beam_width;
            if (constrained) cfg["constrained"] = true;
            ro = cmd_eval(cfg, out, plot);
        } else {
            op = "compare";
            ro = cmd_compare(cfg, out, plot);
        }
        write_provenance(op, cfg, ro);
        return 0;
    } catch (const TrainingDivergedError& e) {
        std::cerr << "error (training diverged at step " << e.step << "): " << e.what() << '\n';
        return 4;
    } catch (const HashMismatchError& e) {
        std::cerr << "error (hash mismatch): " << e.what() << '\n';
        return 5;
    } catch (const MissingInputError& e) {
        std::cerr << "error (missing input): " << e.what() << '\n';
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error (config): " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error (config): " << e.what() << '\n';
        return 2;
    }
}

} // namespace raddpo::cli
