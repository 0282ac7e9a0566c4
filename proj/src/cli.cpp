#include "vos/cli.hpp"

#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "vos/augment.hpp"
#include "vos/config.hpp"
#include "vos/train.hpp"

namespace vos {

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::vector<int> parse_scales(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::pair<std::string, std::string>> infer_entries(const InferConfig& c) {
  return {{"scales", join(c.scales)},
          {"flip", c.flip ? "true" : "false"},
          {"tmax", std::to_string(c.t_max)},
          {"interval", std::to_string(c.interval)},
          {"out", c.output_root.string()},
          {"dump_probs", c.dump_probs ? "true" : "false"},
          {"jobs", std::to_string(c.jobs)}};
}

fs::path find_image(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg"})
    if (fs::exists(dir / (id + ext))) return dir / (id + ext);
  throw DataError("no image for record '" + id + "' under " + dir.string());
}

// ---------------------------------------------------------------------------

int cmd_datagen(const fs::path& records_dir, const fs::path& images_dir, const std::string& classes, int synthetic,
                int frames, int size, int objects, std::uint64_t seed, fs::path out, const std::vector<std::string>& argv) {
  RunManifest manifest{"datagen", argv, {}, seed, "", utc_timestamp(), ""};
  if (out.empty()) out = pipeline_cache_dir() / "corpus";
  struct Item {
    std::string id;
    std::vector<Frame> frames;
    std::vector<MaskMap> masks;
  };
  std::vector<Item> corpus;

  if (!records_dir.empty()) {
    std::set<std::string> allowed = default_allowed_classes();
    if (!classes.empty()) {
      allowed.clear();
      std::stringstream ss(classes);
      std::string c;
      while (std::getline(ss, c, ','))
        if (!c.empty()) allowed.insert(c);
    }
    const auto records = load_instance_records(records_dir);
    const auto kept = filter_and_binarize(records, allowed);
    std::cout << "kept " << kept.size() << " / " << records.size() << " instance records\n";
    std::map<std::string, std::vector<InstanceRecord>> by_image;
    for (const auto& r : kept) by_image[r.image_id].push_back(r);
    for (const auto& [id, recs] : by_image) {
      MaskMap merged = merge_masks(recs);
      Frame image = load_frame(find_image(images_dir.empty() ? records_dir : images_dir, id));
      if (image.height() != merged.height() || image.width() != merged.width())
        throw DataError("record masks of '" + id + "' do not match the image size");
      corpus.push_back({id, {std::move(image)}, {std::move(merged)}});
    }
  }
  Rng rng(seed);
  for (int i = 0; i < synthetic; ++i) {
    auto [image, mask] = synth_scene(size, size, objects, rng);
    char id[32];
    std::snprintf(id, sizeof id, "synthetic_%04d", i);
    Item item{id, {}, {}};
    if (frames > 1) {
      VideoSample v = synth_video(image, mask, frames, AffineJitter{}, rng);
      item.frames = std::move(v.frames);
      for (auto& m : v.masks) item.masks.push_back(*m);
    } else {
      item.frames.push_back(std::move(image));
      item.masks.push_back(std::move(mask));
    }
    corpus.push_back(std::move(item));
  }
  if (corpus.empty()) {
    std::cerr << "datagen: empty corpus, nothing written\n";
    return 2;
  }
  for (const auto& item : corpus)
    for (std::size_t t = 0; t < item.frames.size(); ++t) {
      char name[16];
      std::snprintf(name, sizeof name, "%05zu.png", t);
      save_frame(item.frames[t], out / "JPEGImages" / item.id / name);
      save_mask(item.masks[t], out / "Annotations" / item.id / name);
    }
  std::cout << "wrote " << corpus.size() << " sequences to " << out.string() << "\n";
  manifest.config = {{"records", records_dir.string()}, {"images", images_dir.string()}, {"classes", classes},
                     {"synthetic", std::to_string(synthetic)}, {"frames", std::to_string(frames)},
                     {"size", std::to_string(size)}, {"objects", std::to_string(objects)}, {"out", out.string()}};
  manifest.finished = utc_timestamp();
  manifest.write(out / "manifest.json");
  return 0;
}

struct TrainArgs {
  std::string stage;
  std::string preset = "paper";
  fs::path config_file;
  fs::path resume;
  fs::path data;
  fs::path statics;
  fs::path init;
  fs::path out;
  std::string layout = "davis";
  std::string split = "train";
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // explicit --key value overrides
  int log_every = 25;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  const Stage stage = parse_stage(a.stage);
  TrainConfig cfg;
  if (a.preset == "paper") cfg = TrainConfig::paper(stage);
  else if (a.preset == "toy") cfg = TrainConfig::toy(stage);
  else throw UsageError("unknown preset '" + a.preset + "' (expected paper or toy)");
  std::map<std::string, std::string> net_meta;
  if (!a.config_file.empty()) {
    const auto ini = load_ini(a.config_file);
    for (const char* section : {"train", a.stage.c_str()})
      if (auto it = ini.find(section); it != ini.end())
        for (const auto& [k, v] : it->second) cfg.set(k, v);
    if (auto it = ini.find("net"); it != ini.end())
      for (const auto& [k, v] : it->second) net_meta[k == "tokens" ? "object_mem.tokens" : "net." + k] = v;
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : a.flags) cfg.set(k, v);
  cfg.stage = stage;
  cfg.out_dir = a.out.empty() ? pipeline_cache_dir() / "train" / a.stage : a.out;
  cfg.validate();

  TrainSources sources;
  const LayoutFlavor flavor = parse_layout_flavor(a.layout);
  if (stage == Stage::kPretrain) {
    if (!a.data.empty()) sources.add_static_dataset(a.data);
    if (!a.statics.empty()) sources.add_static_dataset(a.statics);
    if (sources.statics.empty()) throw DataError("pretraining needs --data or --static with image/mask pairs");
  } else {
    if (a.data.empty()) throw UsageError("main training needs --data <video dataset root>");
    sources.add_video_dataset(a.data, flavor, a.split);
  }

  NetConfig nc = !a.resume.empty() ? checkpoint_net_config(a.resume)
                 : !a.init.empty() ? NetConfig::from_meta(ParamStore::read_meta(a.init))
                                   : NetConfig::from_meta(net_meta);
  VosNetwork net(nc);
  if (!a.init.empty() && a.resume.empty()) net.params().load_values(a.init);

  RunManifest manifest{"train", argv, cfg.entries(), cfg.seed, "", utc_timestamp(), ""};
  for (const auto& [k, v] : nc.to_meta()) manifest.config.emplace_back(k, v);
  auto log = [&](const LossRecord& r) {
    if (r.iteration % a.log_every == 0 || r.iteration + 1 == cfg.iters)
      std::printf("[%s] iter %d lr %.3g loss %.5f\n", a.stage.c_str(), r.iteration, r.lr, r.loss), std::fflush(stdout);
  };
  const TrainResult result = train_stage(cfg, net, sources, a.resume, -1, log);
  const fs::path weights = cfg.out_dir / (a.stage + "_weights.vosw");
  if (fs::exists(weights)) manifest.weights_sha1 = git_blob_sha1_file(weights);
  manifest.finished = utc_timestamp();
  manifest.write(cfg.out_dir / (a.stage + "_manifest.json"));
  std::printf("%s finished: %d iterations, final loss %.5f, weights %s (sha1 %s)\n", a.stage.c_str(),
              static_cast<int>(result.history.size()), result.history.empty() ? 0.0 : result.history.back().loss,
              weights.string().c_str(), manifest.weights_sha1.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

VosNetwork load_weights(const fs::path& path, const std::string& what) {
  if (path.empty() || !fs::exists(path)) throw DataError("missing checkpoint for " + what + ": '" + path.string() + "'");
  return VosNetwork::load(path);
}

}  // namespace

void infer_dataset(const DatasetIndex& index, const VosNetwork& net, const InferConfig& config) {
  for (const auto& seq : index.sequences) {
    const VideoSample video = load_video(index, seq.video);
    const TtaResult r = run_tta(video, net, config);
    for (std::size_t t = 0; t < r.masks.size(); ++t) {
      const fs::path dir = config.output_root / video.id;
      save_mask(r.masks[t], dir / (video.frame_names[t] + ".png"));
      if (config.dump_probs) write_prob_stack(r.probs[t], video.object_ids, dir / (video.frame_names[t] + ".prob"));
    }
  }
}

MetricReport infer_and_score(const DatasetIndex& index, const VosNetwork& net, const InferConfig& config) {
  std::vector<ObjectScore> scores;
  for (const auto& seq : index.sequences) {
    const VideoSample video = load_video(index, seq.video);
    const TtaResult r = run_tta(video, net, config);
    if (!config.output_root.empty())
      for (std::size_t t = 0; t < r.masks.size(); ++t)
        save_mask(r.masks[t], config.output_root / video.id / (video.frame_names[t] + ".png"));
    auto s = evaluate_video(video.id, r.masks, video.masks);
    scores.insert(scores.end(), s.begin(), s.end());
  }
  return MetricReport::aggregate(std::move(scores));
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "Method                 J       F       J&F\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %s  %s  %s\n", r.name.c_str(), format_score(r.j).c_str(),
                  format_score(r.f).c_str(), format_score(r.j_and_f).c_str());
    out += buf;
  }
  return out;
}

namespace {

int dispatch(CLI::App& app, const std::vector<std::string>& args) {
  app.require_subcommand(1);
  std::vector<std::string> argv = args;

  // datagen
  auto* dg = app.add_subcommand("datagen", "Build a pretraining corpus from instance records and/or synthetic scenes");
  fs::path dg_records, dg_images, dg_out;
  std::string dg_classes;
  int dg_synth = 0, dg_frames = 1, dg_size = 64, dg_objects = 2;
  std::uint64_t dg_seed = 1;
  dg->add_option("--records", dg_records, "Directory of <image_id>/<k>_<class>.png instance masks");
  dg->add_option("--images", dg_images, "Directory of <image_id>.{png,jpg} source images (default: --records)");
  dg->add_option("--classes", dg_classes, "Comma-separated allowed classes (default: built-in list)");
  dg->add_option("--synthetic", dg_synth, "Number of synthetic scenes to add");
  dg->add_option("--frames", dg_frames, "Frames per synthetic sequence (1 = static pair)");
  dg->add_option("--size", dg_size, "Synthetic frame size in pixels");
  dg->add_option("--objects", dg_objects, "Objects per synthetic scene");
  dg->add_option("--seed", dg_seed, "Random seed");
  dg->add_option("--out", dg_out, "Output corpus root");

  // train
  auto* tr = app.add_subcommand("train", "Run one training stage");
  TrainArgs ta;
  tr->add_option("--stage", ta.stage, "pretrain or main")->required();
  tr->add_option("--preset", ta.preset, "paper or toy");
  tr->add_option("--config", ta.config_file, "INI config ([train], [pretrain]/[main], [net])");
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from");
  tr->add_option("--data", ta.data, "Dataset root (static pairs for pretrain, videos for main)");
  tr->add_option("--static", ta.statics, "Extra static image/mask corpus for pretraining");
  tr->add_option("--init", ta.init, "Initial weights (e.g. pretraining output)");
  tr->add_option("--out", ta.out, "Output directory");
  tr->add_option("--layout", ta.layout, "davis, davis2017, youtubevos or mose");
  tr->add_option("--split", ta.split, "Split directory for youtubevos/mose layouts");
  tr->add_option("--set", ta.sets, "Override any training option: key=value");
  tr->add_option("--log-every", ta.log_every, "Print the loss every N iterations");
  std::map<std::string, std::string> tr_values;
  const std::vector<std::pair<std::string, std::string>> tr_flags = {
      {"--iters", "iters"}, {"--batch", "batch"}, {"--lr", "lr"}, {"--crop", "crop"}, {"--seq-len", "seq_len"},
      {"--seed", "seed"}, {"--weight-decay", "weight_decay"}, {"--decay-points", "decay_points"},
      {"--checkpoint-every", "checkpoint_every"}, {"--blur", "blur"}};
  for (const auto& [flag, key] : tr_flags) tr->add_option(flag, tr_values[key], "Overrides " + key);

  // infer
  auto* in = app.add_subcommand("infer", "Segment every video of a dataset");
  fs::path in_data, in_weights, in_config;
  InferConfig ic;
  std::string in_scales = "600,720,800", in_layout = "davis", in_split = "valid";
  bool in_flip = false, in_no_flip = false;
  in->add_option("--data", in_data, "Dataset root")->required();
  in->add_option("--weights", in_weights, "Network weights")->required();
  in->add_option("--scales", in_scales, "Comma-separated max shorter sides; 'native' for none");
  in->add_flag("--flip", in_flip, "Add horizontal-flip branches");
  in->add_flag("--no-flip", in_no_flip, "Disable horizontal-flip branches");
  in->add_option("--tmax", ic.t_max, "Pixel memory capacity");
  in->add_option("--interval", ic.interval, "Memory admission interval");
  in->add_option("--out", ic.output_root, "Output root")->required();
  in->add_flag("--dump-probs", ic.dump_probs, "Also write fused probabilities per frame");
  in->add_option("--jobs", ic.jobs, "Concurrent TTA branches");
  in->add_option("--layout", in_layout, "davis, davis2017, youtubevos or mose");
  in->add_option("--split", in_split, "Split for youtubevos/mose layouts");
  in->add_option("--config", in_config, "INI config with an [infer] section");

  // eval
  auto* ev = app.add_subcommand("eval", "Score predicted masks against ground truth");
  fs::path ev_pred, ev_gt, ev_csv;
  ev->add_option("--pred", ev_pred, "Predictions root")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth root")->required();
  ev->add_option("--csv", ev_csv, "Per-object CSV output");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Baseline / +DA / +DA+TTA+MS comparison table");
  fs::path ab_data, ab_base, ab_da, ab_out;
  std::string ab_scales = "600,720,800", ab_layout = "davis", ab_split = "valid";
  int ab_base_tmax = 5, ab_base_interval = 5, ab_tmax = 18, ab_interval = 1, ab_jobs = 1;
  ab->add_option("--data", ab_data, "Annotated evaluation dataset")->required();
  ab->add_option("--baseline-weights", ab_base, "Weights trained without the extra data augmentation");
  ab->add_option("--da-weights", ab_da, "Weights trained with the extra data augmentation");
  ab->add_option("--scales", ab_scales, "TTA scales for the last row");
  ab->add_option("--base-tmax", ab_base_tmax, "Memory capacity of the first two rows");
  ab->add_option("--base-interval", ab_base_interval, "Memory interval of the first two rows");
  ab->add_option("--tmax", ab_tmax, "Memory capacity of the last row");
  ab->add_option("--interval", ab_interval, "Memory interval of the last row");
  ab->add_option("--jobs", ab_jobs, "Concurrent TTA branches");
  ab->add_option("--out", ab_out, "Directory for predictions and the table");
  ab->add_option("--layout", ab_layout, "davis, davis2017, youtubevos or mose");
  ab->add_option("--split", ab_split, "Split for youtubevos/mose layouts");

  auto* ds = app.add_subcommand("describe", "Print schedules, network size and cache location");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  app.parse(rev);

  if (dg->parsed())
    return cmd_datagen(dg_records, dg_images, dg_classes, dg_synth, dg_frames, dg_size, dg_objects, dg_seed, dg_out,
                       argv);
  if (tr->parsed()) {
    for (const auto& [flag, key] : tr_flags)
      if (tr->count(flag)) ta.flags[key] = tr_values[key];
    return cmd_train(ta, argv);
  }
  if (in->parsed()) {
    if (!in_config.empty()) {
      const auto ini = load_ini(in_config);
      if (auto it = ini.find("infer"); it != ini.end())
        for (const auto& [k, v] : it->second) {
          if (k == "scales" && !in->count("--scales")) in_scales = v;
          else if (k == "flip" && !in->count("--flip") && !in->count("--no-flip")) in_flip = v == "true" || v == "1";
          else if (k == "tmax" && !in->count("--tmax")) ic.t_max = std::stoi(v);
          else if (k == "interval" && !in->count("--interval")) ic.interval = std::stoi(v);
          else if (k == "jobs" && !in->count("--jobs")) ic.jobs = std::stoi(v);
        }
    }
    ic.scales = in_scales == "native" ? std::vector<int>{} : parse_scales(in_scales);
    ic.flip = in_flip && !in_no_flip;
    ic.validate();
    const VosNetwork net = load_weights(in_weights, "inference");
    const DatasetIndex index = scan_dataset(in_data, parse_layout_flavor(in_layout), in_split);
    RunManifest m{"infer", argv, infer_entries(ic), net.config().seed, git_blob_sha1_file(in_weights),
                  utc_timestamp(), ""};
    infer_dataset(index, net, ic);
    m.finished = utc_timestamp();
    m.write(ic.output_root / "manifest.json");
    std::cout << "segmented " << index.sequences.size() << " videos into " << ic.output_root.string() << "\n";
    return 0;
  }
  if (ev->parsed()) {
    const MetricReport r = evaluate(ev_pred, ev_gt);
    if (!ev_csv.empty()) write_metric_csv(r, ev_csv);
    std::cout << "objects " << r.objects.size() << "  J " << format_score(r.j) << "  F " << format_score(r.f)
              << "  J&F " << format_score(r.j_and_f) << "\n";
    return 0;
  }
  if (ab->parsed()) {
    const VosNetwork base = load_weights(ab_base, "Baseline");
    const VosNetwork da = load_weights(ab_da, "Baseline+DA");
    const DatasetIndex index = scan_dataset(ab_data, parse_layout_flavor(ab_layout), ab_split);
    const fs::path out = ab_out.empty() ? pipeline_cache_dir() / "ablate" : ab_out;
    InferConfig single;
    single.scales = {};
    single.flip = false;
    single.t_max = ab_base_tmax;
    single.interval = ab_base_interval;
    single.jobs = ab_jobs;
    InferConfig full;
    full.scales = parse_scales(ab_scales);
    full.flip = true;
    full.t_max = ab_tmax;
    full.interval = ab_interval;
    full.jobs = ab_jobs;
    std::vector<AblationRow> rows;
    auto run = [&](const std::string& name, const VosNetwork& net, InferConfig c, const std::string& dir) {
      c.output_root = out / dir;
      const MetricReport r = infer_and_score(index, net, c);
      rows.push_back({name, r.j, r.f, r.j_and_f});
    };
    run("Baseline", base, single, "baseline");
    run("Baseline+DA", da, single, "baseline_da");
    run("Baseline+DA+TTA+MS", da, full, "baseline_da_tta_ms");
    const std::string table = format_ablation_table(rows);
    std::cout << table;
    fs::create_directories(out);
    std::ofstream(out / "ablation.txt") << table;
    RunManifest m{"ablate", argv, infer_entries(full), da.config().seed, git_blob_sha1_file(ab_da), utc_timestamp(),
                  utc_timestamp()};
    m.config.emplace_back("baseline_weights_sha1", git_blob_sha1_file(ab_base));
    m.write(out / "manifest.json");
    return 0;
  }
  if (ds->parsed()) {
    const NetConfig nc;
    const VosNetwork net(nc);
    std::cout << "paper schedule: "
              << describe_schedule(TrainConfig::paper(Stage::kPretrain), TrainConfig::paper(Stage::kMain)) << "\n";
    std::cout << "toy schedule:   "
              << describe_schedule(TrainConfig::toy(Stage::kPretrain), TrainConfig::toy(Stage::kMain)) << "\n";
    const TrainConfig main = TrainConfig::paper(Stage::kMain);
    std::printf("main-stage lr: iter 0 -> %g, 150000 -> %g, 170000 -> %g\n", lr_at(main, 0), lr_at(main, 150000),
                lr_at(main, 170000));
    std::printf("network: %d blocks, %d object queries, %zu parameters\n", nc.n_blocks, nc.n_queries,
                net.params().parameter_count());
    std::cout << "cache: " << pipeline_cache_dir().string() << "\n";
    return 0;
  }
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Semi-supervised video object segmentation toolkit", "mose-vos"};
  try {
    return dispatch(app, args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, char** argv) { return run_cli(std::vector<std::string>(argv + 1, argv + argc)); }

}  // namespace vos
