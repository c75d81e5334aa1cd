// tgpt command-line tool: fixtures, training, evaluation, rollout, unseen-road
// estimation and the HTTP service.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "tgpt/checkpoint.hpp"
#include "tgpt/data.hpp"
#include "tgpt/longterm.hpp"
#include "tgpt/synthetic.hpp"
#include "tgpt/train.hpp"
#include "tgpt/unseen.hpp"

// httplib after the Eigen-based headers
#include "tgpt/llm_http.hpp"
#include "tgpt/service.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tgpt;

namespace {

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

void write_json_file(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// {"model": ModelConfig fields, "train": TrainOptions fields}; both optional.
struct RunConfig {
  ModelConfig model;
  TrainOptions train;
};

RunConfig read_run_config(const std::optional<fs::path>& p) {
  RunConfig c;
  if (!p) return c;
  const json j = read_json_file(*p);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  return c;
}

/// A JSON literal, or a path to a file holding one.
json json_arg(const std::string& s) {
  if (fs::exists(s)) return read_json_file(s);
  return json::parse(s);
}

std::size_t step_of_timestamp(const TimeSeriesPanel& panel, const std::string& ts) {
  const std::int64_t delta = parse_timestamp_minutes(ts) - panel.start_minutes;
  if (delta < 0 || delta % panel.slice_minutes != 0)
    throw std::invalid_argument("timestamp " + ts + " is not a slice boundary of the panel");
  return static_cast<std::size_t>(delta / panel.slice_minutes);
}

void write_rows_csv(const fs::path& out, const TimeSeriesPanel& like, std::size_t first_step,
                    const Matrix& values, const std::vector<std::string>& ids) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  TimeSeriesPanel p = like;
  p.values = values;
  p.start_minutes = like.start_minutes + static_cast<std::int64_t>(first_step) * like.slice_minutes;
  io::write_series_csv(out, p, ids);
}

const std::vector<std::size_t>& split_starts(const PreparedData& d, const std::string& split) {
  if (split == "train") return d.train.starts;
  if (split == "val") return d.val.starts;
  if (split == "test") return d.test.starts;
  throw std::invalid_argument("unknown split '" + split + "'");
}

void log_epoch(std::size_t e, double loss, double val) {
  std::clog << "epoch " << e << " loss " << loss << " val_mae " << val << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic forecasting, unseen-road estimation and query service"};
  app.require_subcommand(1);

  // make-fixture
  std::string fx_kind = "service", fx_format = "csv";
  fs::path fx_out;
  std::size_t fx_nodes = 8, fx_days = 14, fx_first = 50;
  std::uint64_t fx_seed = 5;
  auto* fx = app.add_subcommand("make-fixture", "Write a synthetic dataset");
  fx->add_option("--kind", fx_kind, "service | sinusoid | cluster")->check(CLI::IsMember({"service", "sinusoid", "cluster"}));
  fx->add_option("--out", fx_out, "Output directory")->required();
  fx->add_option("--nodes", fx_nodes, "Road count (service, sinusoid)");
  fx->add_option("--days", fx_days, "Days of data (service, sinusoid)");
  fx->add_option("--first-id", fx_first, "First road id (service)");
  fx->add_option("--seed", fx_seed);
  fx->add_option("--format", fx_format)->check(CLI::IsMember({"csv", "binary"}));

  // train
  fs::path tr_dataset, tr_out;
  std::optional<fs::path> tr_config, tr_report;
  auto* tr = app.add_subcommand("train", "Train a short-term forecasting checkpoint");
  tr->add_option("--dataset", tr_dataset, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--config", tr_config, "JSON with \"model\" and \"train\" objects")->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--report", tr_report, "Training report JSON");

  // finetune
  fs::path ft_ckpt, ft_dataset, ft_out;
  FinetuneOptions ft_opt;
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint for long-term rollout");
  ft->add_option("--ckpt", ft_ckpt)->required()->check(CLI::ExistingFile);
  ft->add_option("--dataset", ft_dataset)->required()->check(CLI::ExistingFile);
  ft->add_option("--out", ft_out)->required();
  ft->add_option("--epochs", ft_opt.epochs);
  ft->add_option("--lr", ft_opt.lr);
  ft->add_option("--segment", ft_opt.segment_length);
  ft->add_option("--seed", ft_opt.seed);

  // eval
  fs::path ev_ckpt, ev_dataset, ev_report;
  std::string ev_split = "test";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ev_dataset)->required()->check(CLI::ExistingFile);
  ev->add_option("--report", ev_report, "Metrics JSON with per-step arrays")->required();
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));

  // rollout
  fs::path ro_ckpt, ro_dataset, ro_out;
  std::string ro_start;
  double ro_days = 1;
  auto* ro = app.add_subcommand("rollout", "Autoregressive multi-day forecast");
  ro->add_option("--ckpt", ro_ckpt)->required()->check(CLI::ExistingFile);
  ro->add_option("--dataset", ro_dataset, "History to roll out from")->required()->check(CLI::ExistingFile);
  ro->add_option("--start", ro_start, "First forecast timestamp, YYYY-MM-DDTHH:MM")->required();
  ro->add_option("--days", ro_days)->check(CLI::PositiveNumber);
  ro->add_option("--out", ro_out, "CSV, one row per road")->required();

  // pretrain-cosemantic
  fs::path pc_dataset, pc_out;
  PretrainOptions pc_opt;
  std::uint64_t pc_seed = 1;
  auto* pc = app.add_subcommand("pretrain-cosemantic", "Fit the road similarity model");
  pc->add_option("--dataset", pc_dataset)->required()->check(CLI::ExistingFile);
  pc->add_option("--out", pc_out)->required();
  pc->add_option("--epochs", pc_opt.epochs);
  pc->add_option("--lr", pc_opt.lr);
  pc->add_option("--seed", pc_seed);

  // estimate-unseen
  fs::path eu_ckpt, eu_dataset, eu_out;
  std::optional<fs::path> eu_network, eu_config;
  std::string eu_node;
  std::size_t eu_k = 10;
  double eu_days = 1;
  auto* eu = app.add_subcommand("estimate-unseen", "Estimate traffic on a proposed road");
  eu->add_option("--ckpt", eu_ckpt, "Co-semantic model")->required()->check(CLI::ExistingFile);
  eu->add_option("--dataset", eu_dataset, "Existing roads' history")->required()->check(CLI::ExistingFile);
  eu->add_option("--network", eu_network, "Edge list replacing the dataset's network")->check(CLI::ExistingFile);
  eu->add_option("--new-node", eu_node, "Proposed road JSON (literal or file)")->required();
  eu->add_option("--config", eu_config, "JSON with \"model\" and \"train\" objects")->check(CLI::ExistingFile);
  eu->add_option("--k", eu_k, "Similar roads used");
  eu->add_option("--days", eu_days, "Trailing days written")->check(CLI::PositiveNumber);
  eu->add_option("--out", eu_out, "CSV with one row")->required();

  // serve
  fs::path sv_ckpt, sv_dataset;
  std::optional<fs::path> sv_long, sv_cosem, sv_replay;
  std::optional<std::size_t> sv_now;
  std::string sv_host = "127.0.0.1", sv_cors = "*";
  int sv_port = 8080;
  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  sv->add_option("--ckpt", sv_ckpt)->required()->check(CLI::ExistingFile);
  sv->add_option("--dataset", sv_dataset)->required()->check(CLI::ExistingFile);
  sv->add_option("--port", sv_port);
  sv->add_option("--host", sv_host);
  sv->add_option("--long-ckpt", sv_long)->check(CLI::ExistingFile);
  sv->add_option("--cosemantic", sv_cosem)->check(CLI::ExistingFile);
  sv->add_option("--llm-replay", sv_replay, "Recorded LLM replies instead of a live endpoint")->check(CLI::ExistingFile);
  sv->add_option("--now-step", sv_now, "Forecast origin; default: end of the data");
  sv->add_option("--cors-origin", sv_cors);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fx) {
      if (fx_kind == "cluster") {
        auto f = synthetic::two_cluster_fixture();
        save_dataset(fx_out, f.existing(), fx_format);
        ProposedNode p{"held_out", {}};
        for (const auto& [id, km] : f.held_out_links()) p.connections.push_back({id, km});
        write_json_file(fx_out / "held_out.json", p);
      } else if (fx_kind == "sinusoid") {
        synthetic::SinusoidOptions o;
        o.n_nodes = fx_nodes;
        o.days = fx_days;
        o.seed = fx_seed;
        save_dataset(fx_out, synthetic::sinusoid_dataset(o), fx_format);
      } else {
        save_dataset(fx_out, synthetic::service_fixture(fx_nodes, fx_days, fx_seed, fx_first), fx_format);
      }
      std::cout << (fx_out / "manifest.json").string() << '\n';
    } else if (*tr) {
      auto rc = read_run_config(tr_config);
      rc.train.on_epoch = log_epoch;
      const Dataset ds = load_dataset(tr_dataset);
      auto r = train_short_term<float>(ds, rc.model, rc.train);
      json report{{"train", r.report}, {"config", r.data.cfg}, {"options", rc.train}};
      if (!r.data.test.starts.empty()) report["test"] = evaluate(r.model, r.data, r.data.test.starts);
      if (tr_out.has_parent_path()) fs::create_directories(tr_out.parent_path());
      save_checkpoint(tr_out, make_checkpoint(r.model, r.data, ds.network.node_ids(), {{"train", r.report}}));
      if (tr_report) write_json_file(*tr_report, report);
      std::cout << report.dump(2) << '\n';
    } else if (*ft) {
      const Dataset ds = load_dataset(ft_dataset);
      const Checkpoint c = load_checkpoint(ft_ckpt);
      const PreparedData d = prepare_for_checkpoint(ds, c);
      auto model = c.model<float>();
      ft_opt.on_epoch = [](std::size_t e, double l) {
        if (e % 50 == 0) std::clog << "epoch " << e << " loss " << l << '\n';
      };
      auto rep = finetune_long_term(model, d, ft_opt);
      json meta = c.meta;
      meta["finetune"] = {{"epochs", ft_opt.epochs}, {"steps", rep.steps}, {"wall_seconds", rep.wall_seconds}};
      if (ft_out.has_parent_path()) fs::create_directories(ft_out.parent_path());
      save_checkpoint(ft_out, make_checkpoint(model, d, c.node_ids, meta));
      std::cout << meta["finetune"].dump() << '\n';
    } else if (*ev) {
      const Dataset ds = load_dataset(ev_dataset);
      const Checkpoint c = load_checkpoint(ev_ckpt);
      const PreparedData d = prepare_for_checkpoint(ds, c);
      const auto& starts = split_starts(d, ev_split);
      if (starts.empty()) throw std::invalid_argument("split '" + ev_split + "' has no windows");
      json report{{"split", ev_split}, {"windows", starts.size()}, {"horizon", d.cfg.horizon},
                  {"metrics", evaluate(c.model<float>(), d, starts)}};
      write_json_file(ev_report, report);
      std::cout << report["metrics"].dump() << '\n';
    } else if (*ro) {
      const Dataset ds = load_dataset(ro_dataset);
      const Checkpoint c = load_checkpoint(ro_ckpt);
      const PreparedData d = prepare_for_checkpoint(ds, c);
      const std::size_t origin = step_of_timestamp(ds.panel, ro_start);
      const auto steps = static_cast<std::size_t>(std::ceil(ro_days * ds.panel.q));
      const std::size_t stages = (steps + d.cfg.horizon - 1) / d.cfg.horizon;
      auto r = autoregressive_rollout(c.model<float>(), d, origin, stages);
      write_rows_csv(ro_out, ds.panel, origin, r.values.leftCols(static_cast<Eigen::Index>(steps)),
                     ds.network.node_ids());
      std::cout << ro_out.string() << '\n';
    } else if (*pc) {
      const Dataset ds = load_dataset(pc_dataset);
      const auto split = Split::of(ds.panel.length());
      const auto corr = pearson_correlation_graph(ds.panel.values.leftCols(static_cast<Eigen::Index>(split.train_end)));
      std::vector<SpatialSemanticGraph> refs;
      for (std::size_t i = 0; i < ds.network.size(); ++i) refs.push_back(spatial_semantic_graph(ds.network, i));
      CoSemanticModel m(pc_seed);
      auto rep = pretrain_cosemantic(m, refs, corr.a_c, pc_opt);
      if (rep.degenerate) std::clog << "warning: correlations carry no signal\n";
      if (pc_out.has_parent_path()) fs::create_directories(pc_out.parent_path());
      save_cosemantic(pc_out, m);
      std::cout << json{{"initial_loss", rep.loss.empty() ? 0.0 : rep.loss.front()},
                        {"final_loss", rep.final_loss},
                        {"wall_seconds", rep.wall_seconds}}
                       .dump()
                << '\n';
    } else if (*eu) {
      Dataset ds = load_dataset(eu_dataset);
      if (eu_network) {
        std::unordered_map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < ds.network.size(); ++i) index.emplace(ds.network.node_ids()[i], i);
        ds.network = RoadNetwork(ds.network.node_ids(), io::read_edges_csv(*eu_network, index), ds.network.directed());
      }
      auto rc = read_run_config(eu_config);
      if (!eu_config) {
        rc.model.t_w = 1;
        rc.model.embed = 16;
        rc.model.n_blocks = 1;
        rc.model.heads_fusion_rd = rc.model.heads_fusion_rw = 2;
        rc.model.heads_spatial = rc.model.heads_temporal = 4;
        rc.train = service::ServiceOptions{}.estimate.train;
      }
      rc.train.on_epoch = log_epoch;
      const ProposedNode node = json_arg(eu_node).get<ProposedNode>();
      const CoSemanticModel cm = load_cosemantic(eu_ckpt);
      const PreparedData d = prepare_data(ds, rc.model);
      EstimateOptions eo;
      eo.k = eu_k;
      eo.train = rc.train;
      auto est = estimate_unseen_road<float>(cm, ds.network, d, node, std::nullopt, eo);
      const std::size_t end = ds.panel.length();
      const auto span = static_cast<std::size_t>(std::ceil(eu_days * ds.panel.q));
      auto series = est.series(end > span ? end - span : 0, end);
      Matrix row = Eigen::Map<const Eigen::RowVectorXd>(series.data(), static_cast<Eigen::Index>(series.size()));
      write_rows_csv(eu_out, ds.panel, end - series.size(), row, {node.id});
      std::vector<std::string> similar;
      for (auto i : est.selected) similar.push_back(ds.network.node_ids()[i]);
      std::cout << json{{"similar_roads", similar}, {"steps", series.size()}}.dump() << '\n';
    } else if (*sv) {
      service::ServiceOptions opt;
      opt.now_step = sv_now;
      opt.cors_origin = sv_cors;
      std::shared_ptr<agents::LlmClient> llm;
      if (sv_replay) {
        llm = std::make_shared<agents::ReplayLlmClient>(agents::ReplayLlmClient::from_json(read_json_file(*sv_replay)));
      } else if (auto cfg = agents::OpenAiConfig::from_env()) {
        llm = std::make_shared<agents::OpenAiClient>(*cfg);
      }
      service::ServiceAssets assets{load_dataset(sv_dataset), load_checkpoint(sv_ckpt), std::nullopt, std::nullopt};
      if (sv_long) assets.long_term = load_checkpoint(*sv_long);
      if (sv_cosem) assets.cosemantic = load_cosemantic(*sv_cosem);
      service::TrafficService svc(opt, llm);
      svc.load(std::move(assets));
      httplib::Server srv;
      service::bind_routes(srv, svc);
      std::clog << "listening on http://" << sv_host << ':' << sv_port
                << (llm ? sv_replay ? " (replayed LLM)" : " (LLM endpoint)" : " (rule-based parser)") << '\n';
      if (!srv.listen(sv_host, sv_port)) throw std::runtime_error("cannot listen on port " + std::to_string(sv_port));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
