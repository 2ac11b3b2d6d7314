// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "coqmoe/commands.hpp"

using namespace coqmoe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(testing::TempDir()) / ("coqmoe_cmd_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

json gen_into(const fs::path& dir, std::uint64_t seed, GammaVariance g = GammaVariance::normal) {
    GenOptions o;
    o.seed = seed;
    o.out_dir = dir.string();
    o.n_calib = 8;
    o.n_eval = 8;
    o.gamma_variance = g;
    std::ostringstream out;
    EXPECT_EQ(cmd_gen(o, out), 0);
    return json::parse(out.str());
}

json quantize_into(const fs::path& dir, bool reparam = true, const std::string& out_name = "model.q.cqm") {
    QuantizeOptions q;
    q.model_path = (dir / "model.cqm").string();
    q.calib_path = (dir / "calib.cqm").string();
    q.out_path = (dir / out_name).string();
    q.quant.reparam = reparam;
    std::ostringstream out;
    EXPECT_EQ(cmd_quantize(q, out), 0);
    return json::parse(out.str());
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(COQMOE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Seed, FlagEnvAndDefault) {
    ::unsetenv(kSeedEnv);
    EXPECT_EQ(resolve_seed(std::nullopt), kDefaultSeed);
    EXPECT_EQ(resolve_seed(7), 7u);
    ::setenv(kSeedEnv, "123", 1);
    EXPECT_EQ(resolve_seed(std::nullopt), 123u);
    EXPECT_EQ(resolve_seed(5), 5u);
    ::setenv(kSeedEnv, "12x", 1);
    EXPECT_THROW(resolve_seed(std::nullopt), UsageError);
    ::setenv(kSeedEnv, "-1", 1);
    EXPECT_THROW(resolve_seed(std::nullopt), UsageError);
    ::unsetenv(kSeedEnv);
}

TEST(Gen, WritesFilesAndReport) {
    const fs::path d = scratch("gen");
    const json r = gen_into(d, 3);
    EXPECT_EQ(r.at("schema"), kReportSchema);
    EXPECT_EQ(r.at("seed"), 3);
    for (const char* f : {"model.cqm", "calib.cqm", "eval.cqm"}) EXPECT_TRUE(fs::exists(d / f)) << f;
    const ArchiveReader m = ArchiveReader::read((d / "model.cqm").string());
    EXPECT_EQ(r.at("checksums").at("model"), m.checksum());
    EXPECT_EQ(inputs_from_archive(ArchiveReader::read((d / "eval.cqm").string())).size(), 8u);
}

TEST(Gen, SameSeedByteIdentical) {
    const fs::path a = scratch("gen_a"), b = scratch("gen_b");
    gen_into(a, 11);
    gen_into(b, 11);
    for (const char* f : {"model.cqm", "calib.cqm", "eval.cqm"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    const fs::path c = scratch("gen_c");
    gen_into(c, 12);
    EXPECT_NE(slurp(a / "model.cqm"), slurp(c / "model.cqm"));
}

TEST(Gen, InvalidConfigIsUsageError) {
    GenOptions o;
    o.out_dir = scratch("gen_bad").string();
    o.config.head_dim = 3;
    std::ostringstream out;
    EXPECT_THROW(cmd_gen(o, out), UsageError);
    o = {};
    o.n_eval = 0;
    EXPECT_THROW(cmd_gen(o, out), UsageError);
}

TEST(Gen, HighGammaVarianceSpreadsChannels) {
    const GenOutputs g = generate(ModelConfig{}, 5, GammaVariance::high, 1, 1);
    const Vector& gamma = g.weights.blocks[0].ln1_gamma;
    const auto [lo, hi] = std::minmax_element(gamma.begin(), gamma.end());
    EXPECT_GT(*hi / *lo, 10.0);
}

TEST(Quantize, AuditListsFactors) {
    const fs::path d = scratch("quant");
    gen_into(d, 4);
    const json on = quantize_into(d, true);
    EXPECT_EQ(on.at("schema"), kAuditSchema);
    EXPECT_EQ(on.at("rewritten_sites").size(), 2 * ModelConfig{}.n_blocks);
    const json off = quantize_into(d, false, "model.off.cqm");
    EXPECT_TRUE(off.at("rewritten_sites").empty());
}

TEST(Quantize, RejectsQuantizedInput) {
    const fs::path d = scratch("quant_twice");
    gen_into(d, 4);
    quantize_into(d);
    QuantizeOptions q;
    q.model_path = (d / "model.q.cqm").string();
    q.calib_path = (d / "calib.cqm").string();
    q.out_path = (d / "again.cqm").string();
    std::ostringstream out;
    try {
        cmd_quantize(q, out);
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("already quantized"), std::string::npos);
    }
}

TEST(Quantize, RejectsMismatchedCalibration) {
    const fs::path a = scratch("quant_mm_a"), b = scratch("quant_mm_b");
    gen_into(a, 1);
    GenOptions o;
    o.out_dir = b.string();
    o.config.n_tokens = 4;
    o.n_calib = o.n_eval = 2;
    std::ostringstream sink;
    cmd_gen(o, sink);
    QuantizeOptions q;
    q.model_path = (a / "model.cqm").string();
    q.calib_path = (b / "calib.cqm").string();
    q.out_path = (a / "x.cqm").string();
    EXPECT_THROW(cmd_quantize(q, sink), std::runtime_error);
}

TEST(Eval, ChecksPassAndBaselineTable) {
    const fs::path d = scratch("eval");
    gen_into(d, 6);
    quantize_into(d, true);
    quantize_into(d, false, "model.off.cqm");
    EvalOptions e;
    e.float_path = (d / "model.cqm").string();
    e.quant_path = (d / "model.q.cqm").string();
    e.inputs_path = (d / "eval.cqm").string();
    e.baseline_path = (d / "model.off.cqm").string();
    std::ostringstream out;
    EXPECT_EQ(cmd_eval(e, out), 0);
    const json r = json::parse(out.str());
    EXPECT_TRUE(r.at("all_checks_pass").get<bool>());
    EXPECT_EQ(r.at("checks").size(), 4u);
    EXPECT_EQ(r.at("baseline").at("site_table").size(), site_names().size() * ModelConfig{}.n_blocks);
    const double agree = r.at("agreement").at("top1_agreement").get<double>();
    EXPECT_GE(agree, 0.0);
    EXPECT_LE(agree, 1.0);
}

TEST(Eval, HighPrecisionOptionsRecorded) {
    const fs::path d = scratch("eval16");
    gen_into(d, 8);
    QuantizeOptions q;
    q.model_path = (d / "model.cqm").string();
    q.calib_path = (d / "calib.cqm").string();
    q.out_path = (d / "model.q16.cqm").string();
    q.quant.weight_bits = q.quant.act_bits = q.quant.attn_bits = 16;
    std::ostringstream sink;
    cmd_quantize(q, sink);
    EvalOptions e;
    e.float_path = (d / "model.cqm").string();
    e.quant_path = q.out_path;
    e.inputs_path = (d / "eval.cqm").string();
    std::ostringstream out;
    EXPECT_EQ(cmd_eval(e, out), 0);
    const json r = json::parse(out.str());
    EXPECT_EQ(r.at("quant_options").at("act_bits"), 16);
    EXPECT_EQ(r.at("quant_options").at("attn_bits"), 16);
}

TEST(Sim, BroadcastVersusNaiveKColumn) {
    const fs::path d = scratch("sim");
    gen_into(d, 9);
    SimOptions s;
    s.model_path = (d / "model.cqm").string();
    s.inputs_path = (d / "eval.cqm").string();
    s.npe = {1, 2, 4};
    s.policy = {"broadcast", "naive"};
    s.format = "csv";
    std::ostringstream out;
    EXPECT_EQ(cmd_sim(s, out), 0);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line.rfind("npe,nl,bw,policy,fetch,k_bytes", 0), 0u);
    std::map<std::pair<std::string, std::string>, std::string> k;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        ASSERT_GE(cols.size(), 6u);
        k[{cols[3], cols[0]}] = cols[5];
    }
    ASSERT_EQ(k.size(), 6u);
    auto at = [&](const char* policy, const char* npe) { return k.at({policy, npe}); };
    EXPECT_EQ(at("broadcast", "1"), at("broadcast", "4"));
    EXPECT_EQ(at("naive", "1"), at("broadcast", "1"));
    EXPECT_EQ(std::stoull(at("naive", "4")), 4 * std::stoull(at("naive", "1")));
}

TEST(Sim, GateTraceReplayMatchesInputs) {
    const fs::path d = scratch("sim_trace");
    gen_into(d, 10);
    quantize_into(d);
    SimOptions s;
    s.model_path = (d / "model.q.cqm").string();
    s.inputs_path = (d / "eval.cqm").string();
    s.input_index = 2;
    s.dump_gates_path = (d / "gates.json").string();
    s.report_path = (d / "a.json").string();
    std::ostringstream out;
    EXPECT_EQ(cmd_sim(s, out), 0);
    SimOptions t = s;
    t.inputs_path.reset();
    t.gate_trace_path = (d / "gates.json").string();
    t.dump_gates_path.reset();
    t.report_path = (d / "b.json").string();
    EXPECT_EQ(cmd_sim(t, out), 0);
    const json a = json::parse(slurp(d / "a.json")), b = json::parse(slurp(d / "b.json"));
    EXPECT_EQ(a.at("sweep"), b.at("sweep"));
}

TEST(Sim, UsageErrors) {
    const fs::path d = scratch("sim_err");
    gen_into(d, 1);
    SimOptions s;
    s.model_path = (d / "model.cqm").string();
    std::ostringstream out;
    EXPECT_THROW(cmd_sim(s, out), UsageError);
    s.inputs_path = (d / "eval.cqm").string();
    s.npe = {};
    EXPECT_THROW(cmd_sim(s, out), UsageError);
    s.npe = {0};
    EXPECT_THROW(cmd_sim(s, out), UsageError);
    s.npe = {8};
    s.policy = {"diagonal"};
    EXPECT_THROW(cmd_sim(s, out), UsageError);
    s.policy = {"broadcast"};
    s.input_index = 99;
    EXPECT_THROW(cmd_sim(s, out), UsageError);
}

TEST(Cli, ExitCodes) {
    const fs::path d = scratch("cli");
    const std::string dir = d.string();
    EXPECT_EQ(run_cli("gen --seed 2 --calib 4 --eval 4 --out-dir " + dir + " --report " + dir + "/gen.json"), 0);
    EXPECT_EQ(run_cli("gen --heads 3 --out-dir " + dir + "/bad"), 2);
    EXPECT_EQ(run_cli("bogus"), 2);
    EXPECT_EQ(run_cli("quantize --model " + dir + "/model.cqm --calib " + dir + "/calib.cqm --out " + dir +
                      "/model.q.cqm --audit " + dir + "/audit.json"),
              0);
    EXPECT_EQ(run_cli("quantize --model " + dir + "/model.q.cqm --calib " + dir + "/calib.cqm --out " + dir +
                      "/x.cqm"),
              1);
    EXPECT_EQ(run_cli("eval --float " + dir + "/model.cqm --quant " + dir + "/model.q.cqm --inputs " + dir +
                      "/eval.cqm --report " + dir + "/eval.json"),
              0);
    EXPECT_EQ(run_cli("sim --model " + dir + "/model.cqm --inputs " + dir + "/eval.cqm --npe ''"), 2);
    EXPECT_EQ(run_cli("sim --model " + dir + "/model.cqm --inputs " + dir + "/eval.cqm --format csv --report " +
                      dir + "/sim.csv"),
              0);
    EXPECT_EQ(run_cli("sim --model " + dir + "/missing.cqm --inputs " + dir + "/eval.cqm"), 1);
}
