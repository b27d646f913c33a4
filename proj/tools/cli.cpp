#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "masa/attention_control.hpp"
#include "masa/checkpoint.hpp"
#include "masa/errors.hpp"
#include "masa/image.hpp"
#include "masa/pipeline.hpp"
#include "masa/scene.hpp"
#include "masa/train.hpp"
#include "plot.hpp"
#include "run_config.hpp"

namespace masa::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string fnv1a64(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream s;
  s << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// Hashes every file under out_dir except the manifest itself, sorted by path.
json hash_outputs(const fs::path& out_dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json outputs = json::object();
  for (const auto& f : files) outputs[fs::relative(f, out_dir).generic_string()] = fnv1a64(f);
  return outputs;
}

void write_manifest(const fs::path& out_dir, const RunConfig& c, json results) {
  json m{{"tool", "masa"},
         {"manifest_version", kManifestVersion},
         {"run_config", to_json(c)},
         {"results", std::move(results)},
         {"outputs", hash_outputs(out_dir)}};
  std::ofstream(out_dir / "manifest.json") << m.dump(2) << '\n';
}

json spec_json(const SceneEstimate& e) {
  return json{{"shape", to_string(e.spec.shape)},
              {"fg_color", to_string(e.spec.fg_color)},
              {"position", to_string(e.spec.position)},
              {"bg_color", to_string(e.spec.bg_color)},
              {"confidence", e.confidence},
              {"low_confidence", e.low_confidence}};
}

PromptTokens parse_prompt(const TokenGrammar& g, const std::string& phrase) {
  try {
    return g.parse(phrase);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
}

struct LoadedModel {
  Checkpoint checkpoint;
  Denoiser<float> model;
};

LoadedModel load_model(const RunConfig& c) {
  if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(c.checkpoint)) throw UsageError("checkpoint " + c.checkpoint + " does not exist");
  LoadedModel m{load_checkpoint(c.checkpoint), {}};
  m.model = load_denoiser(m.checkpoint);
  return m;
}

Image load_image_for(const Denoiser<float>& model, const std::string& path) {
  if (!fs::exists(path)) throw UsageError("image " + path + " does not exist");
  Image img = read_png_rgb(path);
  const int size = model.config().image_size;
  if (img.width != size || img.height != size) {
    throw UsageError("image " + path + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     " but the model expects " + std::to_string(size) + "x" + std::to_string(size));
  }
  return img;
}

ControlConfig resolve_control(RunConfig& c, const Denoiser<float>& model) {
  const ControlConfig ref = default_control(model, c.sampler.steps);
  if (!c.start_step) c.start_step = ref.start_step;
  if (!c.start_layer) c.start_layer = ref.start_layer;
  ControlConfig cc;
  cc.start_step = *c.start_step;
  cc.start_layer = *c.start_layer;
  cc.mask_enabled = c.mask;
  cc.source_token_index = c.source_token;
  cc.target_token_index = c.target_token;
  cc.mask_threshold = c.mask_threshold;
  cc.apply_to_unconditional = c.apply_to_unconditional;
  cc.validate(model.config().max_tokens);
  return cc;
}

Mask2D mask_image(const ForegroundMask& m) {
  Mask2D out(m.side, m.side);
  out.values = m.grid;
  return out;
}

json stats_json(const ControlStats& s) {
  return json{{"substitutions", s.substitutions},
              {"substituted_items", s.substituted_items},
              {"masked_evaluations", s.masked_evaluations},
              {"mask_fallbacks", s.mask_fallbacks}};
}

// ------------------------------------------------------------------ commands

json cmd_train(RunConfig& c, const fs::path& out, std::ostream& log) {
  const fs::path state_path = out / "train_state.masa";
  std::optional<Trainer> trainer;
  if (c.resume) {
    if (c.checkpoint.empty()) throw UsageError("--resume needs --checkpoint pointing at a training state");
    if (!fs::exists(c.checkpoint)) throw UsageError("checkpoint " + c.checkpoint + " does not exist");
    if (fs::exists(state_path) && fs::equivalent(c.checkpoint, state_path)) {
      throw UsageError("resume input would be overwritten; write to a different --out-dir");
    }
    trainer.emplace(Trainer::resume(load_checkpoint(c.checkpoint)));
    const int total = c.train.steps;
    c.model = trainer->model().config();
    c.schedule = trainer->schedule().params();
    c.train = trainer->config();
    c.train.steps = total;
    trainer->set_total_steps(total);
  } else {
    trainer.emplace(c.model, c.schedule, c.train);
  }
  const TokenGrammar grammar(c.model.max_tokens);
  const auto data = make_dataset(c.train.dataset_size, c.train.data_seed, grammar, c.model.image_size);
  const int start = trainer->completed_steps();
  log << "training " << trainer->model().num_parameters() << " parameters from step " << start << " to "
      << c.train.steps << '\n';
  auto save = [&] {
    save_checkpoint(state_path, trainer->checkpoint());
    save_checkpoint(out / "model.masa", trainer->inference_checkpoint());
  };
  while (trainer->completed_steps() < c.train.steps) {
    const double loss = trainer->step(data);
    const int done = trainer->completed_steps();
    if (done % 100 == 0 || done == c.train.steps) log << "step " << done << " loss " << loss << std::endl;
    if (done % 500 == 0) save();
  }
  save();
  const auto& losses = trainer->losses();
  write_png_rgb(out / "loss_curve.png", plot_loss_curve(losses));
  {
    std::ofstream csv(out / "loss.csv");
    csv << "step,loss\n";
    csv << std::setprecision(9);
    for (const auto& p : losses) csv << p.step << ',' << p.loss << '\n';
  }
  json r{{"completed_steps", trainer->completed_steps()}, {"resumed_from_step", start},
         {"num_parameters", trainer->model().num_parameters()}};
  if (!losses.empty()) {
    const std::size_t tail = std::min<std::size_t>(100, losses.size());
    double mean = 0;
    for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) mean += losses[i].loss;
    r["initial_loss"] = losses.front().loss;
    r["final_loss_mean_last_100"] = mean / static_cast<double>(tail);
  }
  return r;
}

json cmd_sample(RunConfig& c, const fs::path& out) {
  const auto m = load_model(c);
  const Sampler sampler(m.model, m.checkpoint.schedule);
  const TokenGrammar g(m.model.config().max_tokens);
  const auto tokens = parse_prompt(g, c.prompt);
  const auto res = synthesize(sampler, tokens, c.seed, c.sampler);
  write_png_rgb(out / "sample.png", res.image);
  if (c.save_trajectory) {
    save_checkpoint(out / "trajectory.masa",
                    trajectory_container(m.model.config(), m.checkpoint.schedule, {res.trajectory}));
  }
  return json{{"tokens", tokens.ids}, {"classified", spec_json(scene_classify(quantize8(res.image)))}};
}

json cmd_edit(RunConfig& c, const fs::path& out) {
  const auto m = load_model(c);
  const Sampler sampler(m.model, m.checkpoint.schedule);
  const TokenGrammar g(m.model.config().max_tokens);
  EditRequest req;
  req.source_prompt = parse_prompt(g, c.source_prompt);
  req.target_prompt = parse_prompt(g, c.target_prompt);
  if (!c.image.empty()) {
    req.image = load_image_for(m.model, c.image);
  } else {
    req.seed = c.seed;
  }
  req.sampler = c.sampler;
  req.control = resolve_control(c, m.model);
  const EditResult res = masactrl_edit(sampler, req);
  write_png_rgb(out / "I_s.png", res.source);
  write_png_rgb(out / "I.png", res.target);
  if (!res.masks.empty()) {
    write_png_mask(out / "mask_source.png", mask_image(res.masks.back().first));
    write_png_mask(out / "mask_target.png", mask_image(res.masks.back().second));
  }
  if (c.save_trajectory) {
    std::vector<Trajectory> trajs{res.source_trajectory, res.target_trajectory};
    if (res.inversion_trajectory) trajs.push_back(*res.inversion_trajectory);
    save_checkpoint(out / "trajectory.masa", trajectory_container(m.model.config(), m.checkpoint.schedule, trajs));
  }
  const auto scores = score_edit(quantize8(res.target), quantize8(res.source), req.source_prompt, req.target_prompt);
  return json{{"controller", stats_json(res.stats)},
              {"source_classified", spec_json(scene_classify(quantize8(res.source)))},
              {"target_classified", spec_json(scene_classify(quantize8(res.target)))},
              {"content_preservation", scores.content},
              {"layout_compliance", scores.layout}};
}

json cmd_invert(RunConfig& c, const fs::path& out) {
  const auto m = load_model(c);
  if (c.image.empty()) throw UsageError("--image is required");
  const Sampler sampler(m.model, m.checkpoint.schedule);
  const TokenGrammar g(m.model.config().max_tokens);
  const auto tokens = parse_prompt(g, c.prompt);
  const Image img = load_image_for(m.model, c.image);
  const auto inv = invert(sampler, img, tokens, c.sampler.steps);
  const auto rec = sample_from(sampler, inv.z_T, tokens, SamplerConfig{c.sampler.steps, 1.0});
  save_checkpoint(out / "latent.masa",
                  trajectory_container(m.model.config(), m.checkpoint.schedule, {inv.trajectory}));
  write_png_rgb(out / "reconstruction.png", rec.image);
  const Image rec8 = quantize8(rec.image);
  double mean = 0, sq = 0;
  for (float v : inv.z_T.values()) {
    mean += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(inv.z_T.size());
  mean /= n;
  return json{{"guidance", 1.0},
              {"mae", mean_abs_error(rec8, img)},
              {"psnr", psnr(rec8, img)},
              {"latent_mean", mean},
              {"latent_std", std::sqrt(std::max(0.0, sq / n - mean * mean))}};
}

json cmd_ablate(RunConfig& c, const fs::path& out) {
  if (c.sweep_start_steps.empty() || c.sweep_start_layers.empty()) {
    throw UsageError("ablate needs non-empty --S-values and --L-values");
  }
  const auto m = load_model(c);
  const Sampler sampler(m.model, m.checkpoint.schedule);
  const TokenGrammar g(m.model.config().max_tokens);
  EditRequest req;
  req.source_prompt = parse_prompt(g, c.source_prompt);
  req.target_prompt = parse_prompt(g, c.target_prompt);
  if (!c.image.empty()) {
    req.image = load_image_for(m.model, c.image);
  } else {
    req.seed = c.seed;
  }
  req.sampler = c.sampler;
  std::vector<Image> cells;
  Image source;
  json rows = json::array();
  std::ofstream csv(out / "scores.csv");
  csv << "start_step,start_layer,content_preservation,layout_compliance,combined,substitutions\n";
  csv << std::setprecision(9);
  for (int s : c.sweep_start_steps) {
    for (int l : c.sweep_start_layers) {
      RunConfig cell = c;
      cell.start_step = s;
      cell.start_layer = l;
      req.control = resolve_control(cell, m.model);
      const EditResult res = masactrl_edit(sampler, req);
      source = res.source;
      cells.push_back(res.target);
      const auto sc = score_edit(quantize8(res.target), quantize8(res.source), req.source_prompt, req.target_prompt);
      csv << s << ',' << l << ',' << sc.content << ',' << sc.layout << ',' << sc.combined << ','
          << res.stats.substitutions << '\n';
      rows.push_back({{"start_step", s}, {"start_layer", l}, {"content_preservation", sc.content},
                      {"layout_compliance", sc.layout}, {"combined", sc.combined}});
    }
  }
  csv.close();
  write_png_rgb(out / "grid.png", tile_images(cells, static_cast<int>(c.sweep_start_layers.size())));
  write_png_rgb(out / "source.png", source);
  return json{{"rows", "start_step"}, {"columns", "start_layer"}, {"cells", rows}};
}

json cmd_dump_attn(RunConfig& c, const fs::path& out) {
  const auto m = load_model(c);
  const Sampler sampler(m.model, m.checkpoint.schedule);
  const TokenGrammar g(m.model.config().max_tokens);
  const auto tokens = parse_prompt(g, c.prompt);
  if (c.steps_of_interest.empty()) {
    c.steps_of_interest = {std::min(map_reference_step(15, c.sampler.steps), std::max(0, c.sampler.steps - 1))};
  }
  for (int s : c.steps_of_interest) {
    if (s < 0 || s >= c.sampler.steps) throw UsageError("step of interest " + std::to_string(s) + " out of range");
  }
  AttentionRecord<float> record;
  CrossMapStore<float> maps;
  RecordingController<float> ctl(m.model.layer_registry().size(), &record, &maps, {.record_self = true, .record_queries = true});
  const auto res = sample_from(sampler, sampler.initial_noise(c.seed), tokens, c.sampler, &ctl);
  std::vector<std::string> labels;
  const auto& vocab = TokenGrammar::vocabulary();
  for (int id : tokens.ids) labels.push_back(vocab.at(static_cast<std::size_t>(id)));
  const int cond_item = c.sampler.guidance == 1.0 ? 0 : 1;
  write_attention_dump(out, m.model.layer_registry(), maps, record, c.steps_of_interest, labels, cond_item);
  write_png_rgb(out / "sample.png", res.image);
  return json{{"steps_of_interest", c.steps_of_interest}, {"tokens", tokens.ids}};
}

json cmd_dataset(RunConfig& c, const fs::path& out) {
  if (c.dataset_n < 1) throw UsageError("--n must be positive");
  const TokenGrammar g(c.model.max_tokens);
  const auto data = make_dataset(c.dataset_n, c.seed, g, c.dataset_size);
  fs::create_directories(out / "images");
  fs::create_directories(out / "rasters");
  std::ofstream lines(out / "dataset.jsonl");
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << i << ".png";
    const auto& s = data[i];
    write_png_rgb(out / "images" / name.str(), s.image);
    write_png_mask(out / "rasters" / name.str(), s.fg_raster);
    lines << json{{"index", i},
                  {"shape", to_string(s.spec.shape)},
                  {"fg_color", to_string(s.spec.fg_color)},
                  {"position", to_string(s.spec.position)},
                  {"bg_color", to_string(s.spec.bg_color)},
                  {"jitter_seed", s.spec.jitter_seed},
                  {"tokens", s.tokens.ids},
                  {"image", "images/" + name.str()},
                  {"raster", "rasters/" + name.str()}}
                 .dump()
          << '\n';
  }
  return json{{"samples", data.size()}};
}

json execute(RunConfig& c, const fs::path& out, std::ostream& log) {
  if (c.command == "train") return cmd_train(c, out, log);
  if (c.command == "sample") return cmd_sample(c, out);
  if (c.command == "edit") return cmd_edit(c, out);
  if (c.command == "invert") return cmd_invert(c, out);
  if (c.command == "ablate") return cmd_ablate(c, out);
  if (c.command == "dump-attn") return cmd_dump_attn(c, out);
  if (c.command == "dataset") return cmd_dataset(c, out);
  throw UsageError("unknown command '" + c.command + "'");
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-', 1);
    try {
      if (dash != std::string::npos) {
        const int a = std::stoi(item.substr(0, dash)), b = std::stoi(item.substr(dash + 1));
        if (b < a) throw UsageError("bad range '" + item + "'");
        for (int v = a; v <= b; ++v) out.push_back(v);
      } else {
        out.push_back(std::stoi(item));
      }
    } catch (const std::logic_error&) {
      throw UsageError("bad integer list '" + text + "'");
    }
  }
  return out;
}

// Value of "--config" in a subcommand's arguments, if any.
std::optional<std::string> find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

int run_checked(const std::vector<std::string>& args, std::ostream& out) {
  CLI::App app{"Mutual self-attention control on a toy diffusion model"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  RunConfig c;
  if (const auto path = find_config(args)) c = load_run_config(*path);
  std::string out_dir, config_path, manifest_path, s_values, l_values, steps_of_interest;
  int start_step = -1, start_layer = -1, token = -1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "RunConfig JSON file (flags override it)");
    sub->add_option("--out-dir,--out", out_dir, "Output directory")->required();
  };
  auto sampling = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", c.checkpoint, "Model checkpoint");
    sub->add_option("--seed", c.seed, "Initial-noise seed");
    sub->add_option("--steps", c.sampler.steps, "Denoising steps");
    sub->add_option("--guidance", c.sampler.guidance, "Classifier-free guidance scale");
    sub->add_option("--clip-x0", c.sampler.clip_x0, "Clamp bound on the predicted clean sample; 0 disables");
    sub->add_flag("--save-trajectory", c.save_trajectory, "Write latent trajectories");
  };
  auto control = [&](CLI::App* sub) {
    sub->add_option("--S", start_step, "First controlled step (default: mapped reference)");
    sub->add_option("--L", start_layer, "First controlled layer (default: mapped reference)");
    sub->add_flag("--mask", c.mask, "Mask-guided mutual self-attention");
    sub->add_option("--token", token, "Token index for both masks");
    sub->add_option("--source-token", c.source_token, "Token index for the source mask");
    sub->add_option("--target-token", c.target_token, "Token index for the target mask");
    sub->add_option("--tau", c.mask_threshold, "Mask threshold after min-max normalization");
    sub->add_flag("--apply-to-unconditional,!--conditional-only", c.apply_to_unconditional,
                  "Substitute in the unconditional pass too");
    sub->add_option("--source-prompt", c.source_prompt, "Source prompt phrase");
    sub->add_option("--target-prompt", c.target_prompt, "Target prompt phrase");
    sub->add_option("--image", c.image, "Real source image (inverted with the source prompt)");
  };

  auto* train = app.add_subcommand("train", "Train the toy denoiser");
  common(train);
  train->get_option("--config")->required();
  train->add_option("--steps", c.train.steps, "Total optimizer steps");
  train->add_option("--seed", c.train.seed, "Training seed");
  train->add_option("--checkpoint", c.checkpoint, "Training state to resume from");
  train->add_flag("--resume", c.resume, "Resume from --checkpoint");

  auto* sample = app.add_subcommand("sample", "Guided DDIM sampling");
  common(sample);
  sampling(sample);
  sample->add_option("--prompt", c.prompt, "Prompt phrase");

  auto* edit = app.add_subcommand("edit", "Dual-branch edit with mutual self-attention");
  common(edit);
  sampling(edit);
  control(edit);

  auto* inv = app.add_subcommand("invert", "DDIM inversion and reconstruction");
  common(inv);
  sampling(inv);
  inv->add_option("--image", c.image, "Image to invert");
  inv->add_option("--prompt", c.prompt, "Inversion prompt (default: null prompt)");

  auto* ablate = app.add_subcommand("ablate", "Sweep the start step and start layer");
  common(ablate);
  sampling(ablate);
  control(ablate);
  ablate->add_option("--S-values", s_values, "Comma list or ranges, e.g. 0,2,4-6");
  ablate->add_option("--L-values", l_values, "Comma list or ranges");

  auto* dump = app.add_subcommand("dump-attn", "Dump attention maps and query PCA");
  common(dump);
  sampling(dump);
  dump->add_option("--prompt", c.prompt, "Prompt phrase");
  dump->add_option("--steps-of-interest", steps_of_interest, "Comma list of step indices");

  auto* dataset = app.add_subcommand("dataset", "Write the procedural dataset");
  common(dataset);
  dataset->add_option("--n", c.dataset_n, "Number of samples");
  dataset->add_option("--seed", c.seed, "Jitter seed");
  dataset->add_option("--size", c.dataset_size, "Image side");

  auto* replay = app.add_subcommand("replay", "Rerun a command from its manifest");
  replay->add_option("manifest", manifest_path, "manifest.json of an earlier run")->required();
  replay->add_option("--out-dir", out_dir, "Output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();  // prints the selected subcommand's options
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  }

  if (replay->parsed()) {
    std::ifstream in(manifest_path);
    if (!in) throw UsageError("cannot open manifest " + manifest_path);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("manifest " + manifest_path + ": " + e.what());
    }
    if (!m.contains("run_config")) throw UsageError("manifest has no run_config");
    c = run_config_from_json(m.at("run_config"));
  } else {
    c.command = app.get_subcommands().front()->get_name();
    if (start_step >= 0) c.start_step = start_step;
    if (start_layer >= 0) c.start_layer = start_layer;
    if (token >= 0) c.source_token = c.target_token = token;
    if (!s_values.empty()) c.sweep_start_steps = parse_int_list(s_values);
    if (!l_values.empty()) c.sweep_start_layers = parse_int_list(l_values);
    if (!steps_of_interest.empty()) c.steps_of_interest = parse_int_list(steps_of_interest);
    if (const char* env = std::getenv("MASA_SEED"); env && *env) {
      try {
        c.seed = c.train.seed = std::stoull(env);
      } catch (const std::logic_error&) {
        throw UsageError(std::string("MASA_SEED is not an integer: ") + env);
      }
    }
  }

  const fs::path out_path(out_dir);
  fs::create_directories(out_path);
  json results = execute(c, out_path, out);
  write_manifest(out_path, c, std::move(results));
  out << "wrote " << (out_path / "manifest.json").string() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return run_checked(args, out);
  } catch (const CLI::CallForHelp&) {
    out << "usage: masa <train|sample|edit|invert|ablate|dump-attn|dataset|replay> [options]; --help on a "
           "subcommand lists its options\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ControlError& e) {
    err << "control error: " << e.what() << '\n';
    return kExitContract;
  } catch (const ContractError& e) {
    err << "contract error: " << e.what() << '\n';
    return kExitContract;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace masa::cli
