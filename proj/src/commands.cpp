#include "hbfp/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "hbfp/checkpoint.hpp"
#include "hbfp/gradcheck_suite.hpp"
#include "hbfp/model.hpp"
#include "hbfp/rng.hpp"

namespace hbfp {

namespace {

namespace fs = std::filesystem;

DatasetSpec dataset_spec(const RunConfig& cfg) {
  DatasetSpec spec;
  spec.train_ids = cfg.train_ids;
  spec.test_ids = cfg.test_ids;
  spec.per_id = cfg.per_id;
  spec.cameras = cfg.cameras;
  spec.query_per_id = cfg.query_per_id;
  spec.image = {cfg.image_channels, cfg.image_height, cfg.image_width};
  spec.seed = cfg.seed;
  return spec;
}

std::vector<Sample> obtain_dataset(const RunConfig& cfg) {
  if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
  return generate_dataset(dataset_spec(cfg));
}

std::string ensure_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("out_dir must not be empty");
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create out dir '" + cfg.out_dir + "': " + ec.message());
  return cfg.out_dir;
}

// Batched eval-mode embedding extraction, optionally split across workers.
Tensor extract_embeddings(HbfpModel& model, const std::vector<const Sample*>& items,
                          std::size_t workers, std::size_t batch_size = 32) {
  const std::size_t count = items.size();
  Tensor out = Tensor::zeros({count, model.descriptor_dim()});
  auto run_range = [&](std::size_t begin, std::size_t end) {
    NoGradGuard no_grad;
    for (std::size_t at = begin; at < end; at += batch_size) {
      const std::size_t n = std::min(batch_size, end - at);
      const Shape img = items[at]->image.shape();
      Tensor batch = Tensor::zeros({n, img[0], img[1], img[2]});
      for (std::size_t i = 0; i < n; ++i)
        std::copy(items[at + i]->image.values().begin(), items[at + i]->image.values().end(),
                  batch.values().begin() + i * items[at + i]->image.numel());
      ModelOutputs fwd = model.forward(batch, /*training=*/false);
      Tensor desc = final_descriptor(fwd);
      std::copy(desc.values().begin(), desc.values().end(),
                out.values().begin() + at * model.descriptor_dim());
    }
  };
  if (workers <= 1 || count < 2 * batch_size) {
    run_range(0, count);
    return out;
  }
  const std::size_t used = std::min(workers, (count + batch_size - 1) / batch_size);
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + used - 1) / used;
  for (std::size_t w = 0; w < used; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin < end) pool.emplace_back(run_range, begin, end);
  }
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace

std::string cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const std::string dir = ensure_out_dir(cfg);
  const std::string path = (fs::path(dir) / "dataset.hbfpds").string();
  auto samples = generate_dataset(dataset_spec(cfg));
  save_dataset(path, samples);
  std::size_t train = 0, query = 0, gallery = 0;
  for (const auto& s : samples) {
    train += s.split == Split::Train;
    query += s.split == Split::Query;
    gallery += s.split == Split::Gallery;
  }
  log << "dataset: " << samples.size() << " samples (" << train << " train, " << query
      << " query, " << gallery << " gallery) -> " << path << "\n";
  return path;
}

TrainOutput cmd_train(const RunConfig& cfg, std::ostream& log) {
  const std::string dir = ensure_out_dir(cfg);
  auto samples = obtain_dataset(cfg);

  HbfpModel model(cfg);
  Adam opt(cfg.lr, cfg.weight_decay);
  PKSampler sampler(samples, cfg.p_ids, cfg.k_per_id);
  auto sampler_rng = substream(cfg.seed, "sampler");

  std::size_t train_count = 0;
  for (const auto& s : samples) train_count += s.split == Split::Train;
  const std::size_t steps_per_epoch =
      cfg.steps_per_epoch > 0
          ? cfg.steps_per_epoch
          : std::max<std::size_t>(1, train_count / (cfg.p_ids * cfg.k_per_id));
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  TrainOutput out;
  out.loss_log_path = (fs::path(dir) / "loss_log.tsv").string();
  out.checkpoint_path = (fs::path(dir) / "checkpoint.hbfpck").string();
  std::ofstream loss_log(out.loss_log_path);
  if (!loss_log) throw IoError("cannot open loss log '" + out.loss_log_path + "'");
  loss_log << "# step\ttotal\tlow\tmid\tfused\n";

  log << "training: " << total_steps << " steps (" << cfg.epochs << " epochs x "
      << steps_per_epoch << ")\n";
  char line[256];
  for (std::size_t step = 0; step < total_steps; ++step) {
    const StepLosses losses = train_step(model, opt, sampler.next(sampler_rng), cfg);
    std::snprintf(line, sizeof line, "%zu\t%.17g\t%.17g\t%.17g\t%.17g\n", step, losses.total,
                  losses.low, losses.mid, losses.fused);
    loss_log << line;
    out.final_loss = losses.total;
    if ((step + 1) % 50 == 0 || step + 1 == total_steps)
      log << "  step " << (step + 1) << "/" << total_steps << " loss " << losses.total << "\n";
  }
  loss_log.flush();
  if (!loss_log) throw IoError("loss log write failed");
  out.steps = total_steps;

  save_checkpoint(out.checkpoint_path, model.registry(), cfg);
  log << "checkpoint -> " << out.checkpoint_path << "\n";
  return out;
}

RetrievalResult cmd_eval(const RunConfig& cfg, std::ostream& log,
                         const std::optional<std::vector<double>>& lambda_override) {
  if (cfg.checkpoint_path.empty())
    throw ConfigError("eval: checkpoint_path (or --checkpoint) is required");
  const std::string dir = ensure_out_dir(cfg);

  LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint_path);
  HbfpModel model(ck.config);
  restore_registry(ck, model.registry());
  if (lambda_override) model.set_lambdas(*lambda_override);

  // dataset from the explicit file when given, else regenerated from the
  // checkpoint's own data parameters so the split matches training
  RunConfig data_cfg = ck.config;
  data_cfg.dataset_path = cfg.dataset_path;
  auto samples = obtain_dataset(data_cfg);

  std::vector<const Sample*> queries, gallery;
  for (const auto& s : samples) {
    if (s.split == Split::Query) queries.push_back(&s);
    if (s.split == Split::Gallery) gallery.push_back(&s);
  }
  if (queries.empty() || gallery.empty())
    throw ContractError("eval: dataset has no query/gallery split");

  Tensor q_emb = extract_embeddings(model, queries, cfg.workers);
  Tensor g_emb = extract_embeddings(model, gallery, cfg.workers);
  Tensor dist = pairwise_distances(q_emb, g_emb);

  std::vector<RetrievalItem> q_items, g_items;
  for (const Sample* s : queries) q_items.push_back({s->identity, s->camera});
  for (const Sample* s : gallery) g_items.push_back({s->identity, s->camera});
  RetrievalResult result = evaluate(dist, q_items, g_items);

  const std::string metrics_path = (fs::path(dir) / "metrics.tsv").string();
  std::ofstream metrics(metrics_path);
  if (!metrics) throw IoError("cannot open metrics file '" + metrics_path + "'");
  metrics << format_metrics(result, cfg.eval_ranks);
  if (!metrics) throw IoError("metrics write failed");

  for (std::size_t k : cfg.eval_ranks) log << "CMC@" << k << " " << result.cmc_at(k) << "\n";
  log << "mAP " << result.mean_ap << "\n";
  if (result.skipped_queries > 0)
    log << "warning: " << result.skipped_queries << " queries had no valid positive\n";
  log << "metrics -> " << metrics_path << "\n";
  return result;
}

bool cmd_gradcheck(const RunConfig& cfg, std::ostream& report, std::size_t seeds) {
  bool all_passed = true;
  report << "op\tmax_rel_err\ttolerance\tstatus\n";
  for (const GradCheckCase& c : builtin_gradcheck_cases()) {
    const GradCheckResult r = run_gradcheck_case(c, seeds);
    all_passed = all_passed && r.passed;
    report << r.name << "\t" << r.max_rel_err << "\t" << r.tolerance << "\t"
           << (r.passed ? "PASS" : "FAIL") << "\n";
  }
  double composite_worst = 0.0;
  for (std::size_t s = 0; s < seeds; ++s)
    composite_worst = std::max(composite_worst, model_composite_gradcheck(micro_config(cfg.seed),
                                                                          s));
  const bool composite_ok = composite_worst < 1e-3;
  all_passed = all_passed && composite_ok;
  report << "model.composite\t" << composite_worst << "\t" << 1e-3 << "\t"
         << (composite_ok ? "PASS" : "FAIL") << "\n";
  return all_passed;
}

}  // namespace hbfp
