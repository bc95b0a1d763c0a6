#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "patchforge/pipeline.hpp"

using namespace patchforge;

namespace {

void print_rows(const std::vector<MetricsReport>& rows) {
  for (const MetricsReport& r : rows) {
    std::printf("%-12s patches %4zu  rel %.4f  mlg %s  clg %.4f  loc_train %.4f  loc_test %.4f\n", r.method.c_str(),
                r.patch_count, r.reliability, r.mlg ? std::to_string(*r.mlg).c_str() : "-", r.clg_avg,
                r.locality_train, r.locality_test);
  }
}

// A marker file in the work dir is present while a stage runs, so a crashed
// or killed run is visible next to whatever it left behind.
template <class F>
void run_marked(const Pipeline& p, const std::string& stage, F&& body) {
  const std::filesystem::path marker = p.paths().root / "INCOMPLETE";
  write_file_atomic(marker, stage + "\n");
  body();
  std::filesystem::remove(marker);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential model editing with patch neurons on a synthetic multilingual corpus"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string method_flag_text;
  std::string checkpoint;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override a config value, e.g. --set patch.lambda_mem=3");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "Generate and save the corpus");
  CLI::App* train = app.add_subcommand("train-base", "Train the base model");
  CLI::App* edit = app.add_subcommand("edit", "Edit D_edit with one method");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a saved checkpoint on D_edit");
  CLI::App* repro = app.add_subcommand("reproduce", "Run every stage and write the main results table");
  CLI::App* err = app.add_subcommand("error-set", "Edit only the examples the base model gets wrong in every language");
  for (CLI::App* s : {gen, train, edit, eval, repro, err}) add_common(s);
  edit->add_option("--method", method_flag_text, "fine-tune | t-patcher | mpn-only | mpn-all")
      ->required()
      ->check(CLI::IsMember({"fine-tune", "t-patcher", "mpn-only", "mpn-all"}));
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig config = load_run_config(config_path, overrides);
    Pipeline p(config, [](const std::string& msg) {
      std::fprintf(stderr, "%s\n", msg.c_str());
      std::fflush(stderr);
    });
    std::fprintf(stderr, "config %s, seed %llu, work dir %s\n", p.hash().c_str(),
                 static_cast<unsigned long long>(p.config().seed), p.paths().root.string().c_str());

    if (gen->parsed()) {
      run_marked(p, "gen-data", [&] { std::printf("%s\n", p.gen_data().c_str()); });
    } else if (train->parsed()) {
      run_marked(p, "train-base", [&] {
        const TrainResult r = p.train_base_model();
        std::printf("best epoch %zu, val_en %.4f\n", r.best_epoch,
                    r.best_epoch == 0 ? 0.0 : r.val_accuracy[r.best_epoch - 1]);
      });
    } else if (edit->parsed()) {
      run_marked(p, "edit " + method_flag_text, [&] {
        const EditOutcome out = p.edit(parse_method(method_flag_text));
        std::printf("%s: %zu patches, %.1fs\n", out.report.method.c_str(), out.report.patch_count,
                    out.report.wall_seconds);
      });
    } else if (eval->parsed()) {
      run_marked(p, "eval", [&] { print_rows({p.eval_checkpoint(checkpoint)}); });
    } else if (repro->parsed()) {
      run_marked(p, "reproduce", [&] { print_rows(p.reproduce()); });
    } else if (err->parsed()) {
      run_marked(p, "error-set", [&] { print_rows(p.error_set()); });
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "patchforge: %s\n", e.what());
    return 1;
  }
  return 0;
}
