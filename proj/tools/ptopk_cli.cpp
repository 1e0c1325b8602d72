#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ptopk/bench.hpp"
#include "ptopk/config.hpp"
#include "ptopk/gradcheck.hpp"
#include "ptopk/io.hpp"
#include "ptopk/pipeline.hpp"
#include "ptopk/tasks.hpp"

using namespace ptopk;

namespace {

void usage() {
  std::cerr <<
      "usage: ptopk <gendata|train|eval|gradcheck|bench> [--config PATH] [--key value ...]\n"
      "\n"
      "Common keys: --seed U64  --out DIR  --threads INT  --dataset DIR\n"
      "Selection:   --selector {perturbed|sinkhorn|hard}  --k INT  --sigma0 REAL\n"
      "             --samples INT  --sigma-decay {0|1}\n"
      "Model:       --aggregation {mean|max|attention}  --entropy-coeff REAL\n"
      "Training:    --steps INT  --batch-size INT  --learning-rate REAL\n"
      "Tasks:       --task {needle|relational}  --train-size/--val-size/--test-size INT\n"
      "Any config-file key can be overridden the same way.\n";
}

RunConfig parse_args(int argc, char** argv) {
  RunConfig cfg = default_config();
  for (int i = 2; i < argc; i += 2) {
    std::string key = argv[i];
    if (key.rfind("--", 0) != 0) throw std::invalid_argument("expected --key, got: " + key);
    if (i + 1 >= argc) throw std::invalid_argument("missing value for " + key);
    key = key.substr(2);
    for (auto& c : key)
      if (c == '-') c = '_';
    const std::string value = argv[i + 1];
    if (key == "config")
      apply_config_file(cfg, value);
    else
      config_set(cfg, key, value);
  }
  return cfg;
}

Dataset generate(const RunConfig& cfg) {
  if (cfg.str("task") == "needle") return gen_needle(needle_config(cfg));
  return gen_relational(relational_config(cfg));
}

int cmd_gendata(const RunConfig& cfg) {
  const std::string out = cfg.str("out");
  std::filesystem::create_directories(out);
  write_effective_config(cfg, out + "/config.txt");
  Dataset ds = generate(cfg);
  write_dataset(ds, out);

  std::map<int, int> hist;
  for (int64_t i = 0; i < ds.labels.size(); ++i) hist[static_cast<int>(ds.labels[i])] += 1;
  std::printf("task=%s samples=%d image=%dx%d\n", cfg.str("task").c_str(),
              static_cast<int>(ds.labels.size()), ds.images.dim(1), ds.images.dim(2));
  std::printf("label histogram:");
  for (const auto& [label, count] : hist) std::printf(" %d:%d", label, count);
  std::printf("\n");
  return 0;
}

std::vector<Tensor> materialize(const SplitView& split, const PipelineConfig& cfg) {
  std::vector<Tensor> out;
  const int count = split.images.dim(0);
  const int64_t stride = split.images.size() / count;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Tensor img({cfg.image_h, cfg.image_w, cfg.channels});
    for (int64_t j = 0; j < stride; ++j) img[j] = split.images[i * stride + j];
    out.push_back(std::move(img));
  }
  return out;
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.str("dataset").empty()) throw std::invalid_argument("train: --dataset is required");
  Dataset ds = read_dataset(cfg.str("dataset"));
  const int num_classes = std::stoi(dataset_info(ds, "num_classes"));
  PipelineConfig pcfg = pipeline_config(cfg, num_classes);

  const std::string out = cfg.str("out");
  std::filesystem::create_directories(out);
  write_effective_config(cfg, out + "/config.txt");

  SplitView train = dataset_split(ds, "train");
  SplitView test = dataset_split(ds, "test");
  std::vector<Tensor> train_images = materialize(train, pcfg);
  const int train_count = static_cast<int>(train_images.size());
  if (train_count < pcfg.batch_size)
    throw std::invalid_argument("train: batch_size exceeds the training split");

  ModelParams params = init_params(pcfg);
  AdamWState opt;
  CsvWriter metrics(out + "/metrics.csv", "step,loss,accuracy,sigma,scorer_grad_norm,entropy");
  const int ckpt_every = cfg.i("checkpoint_every");

  std::vector<int> order(static_cast<size_t>(train_count));
  for (int i = 0; i < train_count; ++i) order[static_cast<size_t>(i)] = i;
  const int per_epoch = train_count / pcfg.batch_size;

  try {
    for (int64_t step = 0; step < pcfg.steps; ++step) {
      const int64_t epoch = step / per_epoch;
      const int slot = static_cast<int>(step % per_epoch);
      if (slot == 0) {
        Uniform64 u(mix64(pcfg.seed ^ (0x5eedba7cULL + static_cast<uint64_t>(epoch))));
        for (int i = train_count - 1; i > 0; --i)
          std::swap(order[static_cast<size_t>(i)], order[u.next() % static_cast<uint64_t>(i + 1)]);
      }
      Batch batch;
      for (int b = 0; b < pcfg.batch_size; ++b) {
        const int idx = order[static_cast<size_t>(slot * pcfg.batch_size + b)];
        batch.images.push_back(&train_images[static_cast<size_t>(idx)]);
        batch.labels.push_back(train.labels[static_cast<size_t>(idx)]);
      }
      StepMetrics m = train_step(batch, params, opt, pcfg, step);
      char row[256];
      std::snprintf(row, sizeof(row), "%lld,%.6f,%.4f,%.6f,%.8f,%.6f",
                    static_cast<long long>(step), m.loss, m.accuracy, m.sigma,
                    m.scorer_grad_norm, m.entropy);
      metrics.row(row);
      if (ckpt_every > 0 && (step + 1) % ckpt_every == 0) {
        const std::string dir = out + "/ckpt_" + std::to_string(step + 1);
        std::filesystem::create_directories(dir);
        save_checkpoint(dir, params);
      }
    }
  } catch (const TrainingDiverged& e) {
    write_ptkt(out + "/diverged_scores.ptkt", e.scores);
    write_ptkt(out + "/diverged_indicator.ptkt", e.indicator);
    std::cerr << e.what() << "; dumped scores and indicator to " << out << "\n";
    return 2;
  }
  metrics.flush();

  const std::string final_dir = out + "/ckpt_final";
  std::filesystem::create_directories(final_dir);
  save_checkpoint(final_dir, params);

  const double test_acc = evaluate(params, pcfg, test.images, test.labels, Selector::hard);
  CsvWriter eval_csv(out + "/eval.csv", "split,count,accuracy");
  char row[128];
  std::snprintf(row, sizeof(row), "test,%d,%.4f", test.images.dim(0), test_acc);
  eval_csv.row(row);
  std::printf("final test accuracy (hard top-k): %.4f\n", test_acc);
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.str("dataset").empty() || cfg.str("checkpoint").empty())
    throw std::invalid_argument("eval: --dataset and --checkpoint are required");
  Dataset ds = read_dataset(cfg.str("dataset"));
  const int num_classes = std::stoi(dataset_info(ds, "num_classes"));
  PipelineConfig pcfg = pipeline_config(cfg, num_classes);
  ModelParams params = load_checkpoint(cfg.str("checkpoint"));

  const std::string out = cfg.str("out");
  std::filesystem::create_directories(out);
  write_effective_config(cfg, out + "/config.txt");

  CsvWriter eval_csv(out + "/eval.csv", "split,count,accuracy");
  for (const std::string split : {"val", "test"}) {
    SplitView view = dataset_split(ds, split);
    if (view.images.dim(0) == 0) continue;
    const double acc =
        evaluate(params, pcfg, view.images, view.labels, selector_from_string(cfg.str("selector")));
    char row[128];
    std::snprintf(row, sizeof(row), "%s,%d,%.4f", split.c_str(), view.images.dim(0), acc);
    eval_csv.row(row);
    std::printf("%s accuracy: %.4f\n", split.c_str(), acc);
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
  const std::string out = cfg.str("out");
  std::filesystem::create_directories(out);
  write_effective_config(cfg, out + "/config.txt");

  auto rows = run_gradchecks(cfg.u64("seed"), cfg.b("corrupt_backward"));
  CsvWriter csv(out + "/gradcheck.csv", "check,value,reference,tolerance,pass");
  int failures = 0;
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%.8f,%.8f,%.8f,%d", r.check.c_str(), r.value,
                  r.reference, r.tolerance, r.pass ? 1 : 0);
    csv.row(line);
    std::printf("%-26s value=%.6f reference=%.6f tolerance=%.6f %s\n", r.check.c_str(), r.value,
                r.reference, r.tolerance, r.pass ? "PASS" : "FAIL");
    if (!r.pass) {
      std::cerr << "gradcheck failed: " << r.check << "\n";
      ++failures;
    }
  }
  return failures;
}

int cmd_bench(const RunConfig& cfg) {
  const std::string out = cfg.str("out");
  std::filesystem::create_directories(out);
  write_effective_config(cfg, out + "/config.txt");

  PipelineConfig pcfg = pipeline_config(cfg, 4);
  if (pcfg.sigma0 <= 0) pcfg.sigma0 = 0.05f;
  ModelParams params = init_params(pcfg);

  RngStream rng(pcfg.seed, 99);
  Tensor images = gaussian_sample(rng, {cfg.i("bench_images"), pcfg.image_h, pcfg.image_w, 1});
  const int trials = cfg.i("bench_trials");

  CsvWriter csv(out + "/bench.csv", "selector,K,n,images_per_s");
  auto emit = [&](Selector sel, int k, int n) {
    PipelineConfig run = pcfg;
    run.selector = sel;
    run.k = k;
    run.samples = std::max(n, 1);
    auto t = inference_throughput(params, run, images, trials);
    const double med = median(t);
    const char* name = sel == Selector::hard ? "hard" : sel == Selector::perturbed ? "perturbed" : "sinkhorn";
    char row[128];
    std::snprintf(row, sizeof(row), "%s,%d,%d,%.2f", name, k, sel == Selector::hard ? 0 : n, med);
    csv.row(row);
    std::printf("%-10s K=%-3d n=%-4d median %.2f images/s\n", name, k, sel == Selector::hard ? 0 : n, med);
    return t;
  };

  const int max_k = pcfg.geometry().num_patches();
  emit(Selector::hard, pcfg.k, 0);
  for (int n : {10, 100, 500}) emit(Selector::perturbed, pcfg.k, n);
  for (int k : {1, 4, 16})
    if (k <= max_k) emit(Selector::hard, k, 0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    usage();
    return 1;
  }
  const std::string cmd = argv[1];
  try {
    RunConfig cfg = parse_args(argc, argv);
    if (cmd == "gendata") return cmd_gendata(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "eval") return cmd_eval(cfg);
    if (cmd == "gradcheck") return cmd_gradcheck(cfg);
    if (cmd == "bench") return cmd_bench(cfg);
    usage();
    std::cerr << "unknown subcommand: " << cmd << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
