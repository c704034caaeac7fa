#include "mi2m/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace mi2m {

namespace fs = std::filesystem;

MultimodalFrame PreparedDataset::normalized_frame(const FrameRef& ref) const {
  MultimodalFrame f = clips[static_cast<size_t>(ref.clip_index)][static_cast<size_t>(ref.frame_index)];
  if (!norm.empty()) norm.apply(f.csi);
  return f;
}

PreparedDataset prepare_dataset(const std::string& manifest_path, const RunConfig& cfg) {
  PreparedDataset d;
  d.manifest = load_dataset(manifest_path);
  cfg.geometry().validate(d.manifest.shapes);
  d.clips.reserve(d.manifest.clips.size());
  for (size_t i = 0; i < d.manifest.clips.size(); ++i) {
    d.clips.push_back(load_clip_frames(d.manifest, i));
    d.frames_per_clip.push_back(static_cast<int>(d.clips.back().size()));
  }
  d.split = split_pretrain_test(d.manifest, d.frames_per_clip, cfg.split_pretrain_fraction,
                                static_cast<uint64_t>(d.manifest.split_seed));
  for (const FrameRef& r : d.split.pretrain)
    d.norm.fit_update(d.clips[static_cast<size_t>(r.clip_index)][static_cast<size_t>(r.frame_index)].csi);
  return d;
}

EncoderConfig encoder_config_for(const RunConfig& cfg, const DatasetShapes& shapes) {
  PatchGeometry geom = cfg.geometry();
  geom.validate(shapes);
  EncoderConfig ec;
  ec.layers = cfg.enc_layers;
  ec.dim = cfg.enc_dim;
  ec.heads = cfg.enc_heads;
  ec.n_wifi = geom.n_wifi(shapes);
  ec.n_vision = geom.n_vision(shapes);
  ec.wifi_patch_dim = geom.wifi_patch_dim(shapes);
  ec.vision_patch_dim = geom.vision_patch_dim(shapes);
  ec.wifi_vocab = cfg.tok_codebook_size;
  ec.vision_vocab = cfg.tok_codebook_size;
  ec.modality = modality_mode_from(cfg.enc_modality);
  ec.validate();
  return ec;
}

namespace {

TokenizerConfig tokenizer_config_for(const RunConfig& cfg, const DatasetShapes& shapes,
                                     Modality m) {
  TokenizerConfig tc;
  tc.modality = m;
  tc.codebook_size = cfg.tok_codebook_size;
  tc.hidden = cfg.tok_hidden;
  if (m == Modality::wifi) {
    tc.channels = shapes.antennas;
    tc.patch_rows = cfg.geom_csi_rows;
    tc.patch_cols = cfg.geom_csi_cols;
  } else {
    tc.channels = shapes.channels;
    tc.patch_rows = cfg.geom_image_rows;
    tc.patch_cols = cfg.geom_image_cols;
  }
  return tc;
}

TokenizerSchedule tokenizer_schedule_for(const RunConfig& cfg, uint64_t seed, Modality m) {
  TokenizerSchedule s;
  s.lr = cfg.tok_lr;
  s.steps = cfg.tok_steps;
  s.batch = cfg.tok_batch;
  s.tau_start = cfg.tok_tau_start;
  s.tau_end = cfg.tok_tau_end;
  s.usage_weight = cfg.tok_usage_weight;
  s.seed = derive_seed(seed, "tokenizer-train", static_cast<uint64_t>(m));
  return s;
}

}  // namespace

TrainedTokenizers train_tokenizers(const PreparedDataset& data, const RunConfig& cfg,
                                   uint64_t seed) {
  EncoderConfig ec = encoder_config_for(cfg, data.manifest.shapes);
  TrainedTokenizers out;
  PatchGeometry geom = cfg.geometry();
  if (ec.wifi_active()) {
    std::vector<ad::Mat> pools;
    for (const FrameRef& r : data.split.pretrain) {
      MultimodalFrame f = data.normalized_frame(r);
      pools.push_back(patchify(f.csi, geom.csi_rows, geom.csi_cols));
    }
    ad::Mat pool = sample_patch_pool(pools, cfg.tok_max_patches,
                                     derive_seed(seed, "tok-pool-wifi"));
    out.wifi = init_tokenizer(tokenizer_config_for(cfg, data.manifest.shapes, Modality::wifi),
                              derive_seed(seed, "tok-wifi"));
    out.wifi_trace = train_tokenizer(pool, out.wifi,
                                     tokenizer_schedule_for(cfg, seed, Modality::wifi));
  }
  if (ec.vision_active()) {
    std::vector<ad::Mat> pools;
    for (const FrameRef& r : data.split.pretrain) {
      const MultimodalFrame& f =
          data.clips[static_cast<size_t>(r.clip_index)][static_cast<size_t>(r.frame_index)];
      pools.push_back(patchify(f.image, geom.image_rows, geom.image_cols));
    }
    ad::Mat pool = sample_patch_pool(pools, cfg.tok_max_patches,
                                     derive_seed(seed, "tok-pool-vision"));
    out.vision = init_tokenizer(tokenizer_config_for(cfg, data.manifest.shapes, Modality::vision),
                                derive_seed(seed, "tok-vision"));
    out.vision_trace = train_tokenizer(pool, out.vision,
                                       tokenizer_schedule_for(cfg, seed, Modality::vision));
  }
  return out;
}

EncoderParams pretrain_encoder(const PreparedDataset& data, const TrainedTokenizers& toks,
                               const RunConfig& cfg, uint64_t seed,
                               const std::function<void(int, int, double)>& step_trace,
                               const std::function<void(int, EncoderParams&)>& on_epoch,
                               std::vector<EpochStats>* stats_out, EncoderParams* resume_from,
                               int start_epoch) {
  EncoderConfig ec = encoder_config_for(cfg, data.manifest.shapes);
  if (ec.wifi_active() && toks.wifi.cfg.codebook_size != ec.wifi_vocab)
    throw ConfigError("pretrain: wifi tokenizer codebook does not match encoder head");
  if (ec.vision_active() && toks.vision.cfg.codebook_size != ec.vision_vocab)
    throw ConfigError("pretrain: vision tokenizer codebook does not match encoder head");
  PatchGeometry geom = cfg.geometry();

  PretrainData pd;
  pd.geometry = geom;
  pd.frames.reserve(data.split.pretrain.size());
  for (const FrameRef& r : data.split.pretrain) pd.frames.push_back(data.normalized_frame(r));
  if (ec.wifi_active()) {
    pd.wifi_tokens.reserve(pd.frames.size());
    for (const MultimodalFrame& f : pd.frames)
      pd.wifi_tokens.push_back(tokenize(f.csi, toks.wifi, geom).tokens);
  }
  if (ec.vision_active()) {
    pd.vision_tokens.reserve(pd.frames.size());
    for (const MultimodalFrame& f : pd.frames)
      pd.vision_tokens.push_back(tokenize(f.image, toks.vision, geom).tokens);
  }

  EncoderParams enc = resume_from ? std::move(*resume_from)
                                  : init_encoder(ec, derive_seed(seed, "encoder-init-seed"));
  PretrainSchedule sched;
  sched.lr = cfg.enc_lr;
  sched.batch = cfg.enc_batch;
  sched.epochs = cfg.enc_epochs;
  sched.alpha = cfg.enc_alpha;
  sched.seed = derive_seed(seed, "pretrain");
  sched.start_epoch = start_epoch;
  auto stats = pretrain(pd, enc, sched, step_trace,
                        on_epoch ? std::function<void(int)>([&](int e) { on_epoch(e, enc); })
                                 : std::function<void(int)>{});
  if (stats_out) *stats_out = std::move(stats);
  return enc;
}

std::vector<ClipWindow> test_windows(const PreparedDataset& data, int seq_len) {
  return segment_clips(runs_from_split(data.manifest, data.frames_per_clip, data.split.test),
                       seq_len);
}

namespace {

ad::Mat window_features(const PreparedDataset& data, const ClipWindow& w,
                        const EncoderParams& encoder, const PatchGeometry& geom) {
  ad::Mat features(w.length, encoder.cfg.dim);
  for (int t = 0; t < w.length; ++t) {
    MultimodalFrame f = data.normalized_frame(FrameRef{w.clip_index, w.first_frame + t});
    FramePatches fp = make_frame_patches(f, geom, encoder.cfg);
    features.row(t) = extract_frame_feature(fp, encoder).transpose();
  }
  return features;
}

// Head + encoder trained jointly (the unfreeze path for the cross-environment
// study). Gradients flow through the full per-frame encoder forward.
std::vector<FinetuneEpoch> finetune_unfrozen(const PreparedDataset& data,
                                             const std::vector<ClipWindow>& windows,
                                             const std::vector<int>& labels,
                                             EncoderParams& encoder, TemporalHeadParams& head,
                                             const RunConfig& cfg, uint64_t seed) {
  const size_t n = windows.size();
  AdamConfig adam;
  adam.lr = cfg.ft_lr;
  PatchGeometry geom = cfg.geometry();
  std::vector<FinetuneEpoch> out;
  const int batch = std::max(1, std::min<int>(cfg.ft_batch, static_cast<int>(n)));
  for (int epoch = 0; epoch < cfg.ft_epochs; ++epoch) {
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(seed, "finetune-order", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    long long correct = 0;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch)) {
      size_t bend = std::min(n, at + static_cast<size_t>(batch));
      int bsz = static_cast<int>(bend - at);
      TapeBinding tb(head.params);
      tb.add_store(encoder.params, false);
      // per-clip, per-frame encoder features on the tape
      std::vector<std::vector<ad::Var>> clip_feats(static_cast<size_t>(bsz));
      std::vector<int> targets(static_cast<size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const ClipWindow& w = windows[static_cast<size_t>(order[at + static_cast<size_t>(b)])];
        targets[static_cast<size_t>(b)] = labels[static_cast<size_t>(order[at + static_cast<size_t>(b)])];
        for (int t = 0; t < w.length; ++t) {
          MultimodalFrame f = data.normalized_frame(FrameRef{w.clip_index, w.first_frame + t});
          FramePatches fp = make_frame_patches(f, geom, encoder.cfg);
          MaskPlan empty;
          ad::Var x = embed_and_corrupt_tape(tb, encoder, fp, empty);
          ad::Var h = encode_sequence_tape(tb, encoder, x);
          clip_feats[static_cast<size_t>(b)].push_back(ad::mean_rows(h));
        }
      }
      int seq_len = static_cast<int>(clip_feats[0].size());
      std::vector<ad::Var> step_features;
      for (int t = 0; t < seq_len; ++t) {
        std::vector<ad::Var> rows;
        rows.reserve(static_cast<size_t>(bsz));
        for (int b = 0; b < bsz; ++b) rows.push_back(clip_feats[static_cast<size_t>(b)][static_cast<size_t>(t)]);
        step_features.push_back(ad::concat_rows(rows));
      }
      ad::Var logits = temporal_logits_tape(tb, head.cfg, step_features);
      for (int b = 0; b < bsz; ++b) {
        Eigen::Index arg = 0;
        logits.value().row(b).maxCoeff(&arg);
        if (static_cast<int>(arg) == targets[static_cast<size_t>(b)]) ++correct;
      }
      ad::Var loss = ad::affine(ad::nll_rows(logits, targets), 1.0 / bsz, 0.0);
      double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) throw NumericError("finetune: non-finite loss");
      tb.tape().backward(loss);
      head.params.adam_step(tb.collect_grads_for(head.params), adam);
      encoder.params.adam_step(tb.collect_grads_for(encoder.params), adam);
      loss_sum += lv * bsz;
    }
    out.push_back(FinetuneEpoch{epoch, loss_sum / static_cast<double>(n),
                                static_cast<double>(correct) / static_cast<double>(n)});
  }
  return out;
}

}  // namespace

FinetuneResult finetune_head(const PreparedDataset& data, EncoderParams& encoder,
                             const RunConfig& cfg, uint64_t seed) {
  auto runs = runs_from_split(data.manifest, data.frames_per_clip, data.split.pretrain);
  auto windows = segment_clips(runs, cfg.ft_seq_len);
  FinetuneResult res;
  auto budgeted = select_finetune_budget(windows, data.manifest.num_activities,
                                         cfg.ft_budget_seconds, data.manifest.frame_rate,
                                         &res.budget);
  if (budgeted.empty()) throw ValidationError("finetune: budget selected no clips");

  TemporalConfig tc;
  tc.feature_dim = encoder.cfg.dim;
  tc.hidden = cfg.ft_gru_hidden;
  tc.num_classes = task_class_count(cfg.ft_task, data.manifest.num_activities,
                                    data.manifest.num_subjects);
  tc.output_sigmoid = cfg.ft_output_sigmoid;
  res.head = init_temporal_head(tc, derive_seed(seed, "head-init"));

  std::vector<int> labels;
  labels.reserve(budgeted.size());
  for (const ClipWindow& w : budgeted) {
    labels.push_back(task_label(cfg.ft_task, w.activity_label, w.subject_label,
                                data.manifest.num_subjects));
    res.clip_ids.push_back(w.clip_id);
  }

  if (cfg.ft_freeze) {
    FinetuneData fd;
    fd.labels = labels;
    fd.clip_ids = res.clip_ids;
    fd.sequences.reserve(budgeted.size());
    for (const ClipWindow& w : budgeted)
      fd.sequences.push_back(window_features(data, w, encoder, cfg.geometry()));
    FinetuneSchedule fs;
    fs.lr = cfg.ft_lr;
    fs.batch = cfg.ft_batch;
    fs.epochs = cfg.ft_epochs;
    fs.seed = derive_seed(seed, "finetune");
    res.metrics = finetune(fd, res.head, fs);
  } else {
    // class coverage check mirrors the frozen path
    std::set<int> present(labels.begin(), labels.end());
    std::string missing;
    for (int k = 0; k < tc.num_classes; ++k)
      if (!present.count(k)) missing += (missing.empty() ? "" : ", ") + std::to_string(k);
    if (!missing.empty())
      throw ConfigError("finetune: classes absent from the budget: " + missing);
    res.metrics = finetune_unfrozen(data, budgeted, labels, encoder, res.head, cfg,
                                    derive_seed(seed, "finetune"));
  }
  return res;
}

TrainedModel assemble_model(const PreparedDataset& data, const EncoderParams& encoder,
                            const FinetuneResult& ft, const RunConfig& cfg) {
  TrainedModel m;
  m.encoder = encoder;
  m.head = ft.head;
  m.geometry = cfg.geometry();
  m.norm = data.norm;
  m.seq_len = cfg.ft_seq_len;
  m.task = cfg.ft_task;
  m.k_act = data.manifest.num_activities;
  m.k_subj = data.manifest.num_subjects;
  m.finetune_clip_ids = ft.clip_ids;
  return m;
}

std::vector<EvalReport> run_protocol(const ProtocolSpec& spec) {
  validate_config(spec.cfg);
  if (spec.pretrain_manifest.empty()) throw ConfigError("protocol: pretrain manifest missing");
  std::string ft_manifest =
      spec.finetune_manifest.empty() ? spec.pretrain_manifest : spec.finetune_manifest;

  PreparedDataset pre = prepare_dataset(spec.pretrain_manifest, spec.cfg);
  const bool cross = ft_manifest != spec.pretrain_manifest;
  PreparedDataset ft_data_storage;
  if (cross) ft_data_storage = prepare_dataset(ft_manifest, spec.cfg);
  const PreparedDataset& fin = cross ? ft_data_storage : pre;

  EvalCondition cond =
      spec.cfg.eval_condition == "dark" ? EvalCondition::dark : EvalCondition::normal;
  std::vector<EvalReport> reports;
  for (uint64_t seed : spec.cfg.seeds_list()) {
    TrainedTokenizers toks = train_tokenizers(pre, spec.cfg, seed);
    EncoderParams enc = pretrain_encoder(pre, toks, spec.cfg, seed);
    FinetuneResult ft = finetune_head(fin, enc, spec.cfg, seed);
    TrainedModel model = assemble_model(fin, enc, ft, spec.cfg);
    EvalReport r = evaluate(model, fin.manifest, test_windows(fin, spec.cfg.ft_seq_len), cond,
                            spec.cfg.eval_gamma);
    r.pretrain_dataset = pre.manifest.dataset_id;
    r.seeds = {seed};
    reports.push_back(std::move(r));
  }
  EvalReport mean = mean_report(reports);
  reports.push_back(std::move(mean));
  return reports;
}

// --- directory lock -----------------------------------------------------------

DirectoryLock::DirectoryLock(const std::string& dir) {
  fs::create_directories(dir);
  path_ = (fs::path(dir) / "LOCK").string();
  std::ofstream probe(path_, std::ios::out | std::ios::app);
  // O_EXCL semantics via noreplace would need C2x; emulate with exists-check
  // then exclusive create. Races between mi2m processes on one directory are
  // operator error; this catches the common case.
  probe.close();
  std::error_code ec;
  if (fs::exists(path_ + ".held", ec))
    throw IoError("output directory is locked by another run: " + path_ + ".held");
  std::ofstream held(path_ + ".held", std::ios::out | std::ios::trunc);
  if (!held) throw IoError("cannot create lock file: " + path_ + ".held");
  held << "pid=unknown\n";
  path_ += ".held";
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// --- CLI commands ----------------------------------------------------------------

namespace {

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << text;
}

void append_csv(const std::string& path, const std::string& header, const std::string& row) {
  bool fresh = !fs::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot append to " + path);
  if (fresh) os << header << "\n";
  os << row << "\n";
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ";";
    out += ids[i];
  }
  return out;
}

}  // namespace

int cmd_synth(const RunConfig& cfg) {
  validate_config(cfg);
  std::string out = cfg.resolved_output_dir();
  DirectoryLock lock(out);
  DatasetManifest m = generate_synthetic(cfg.synth_config(), out);
  std::cout << "wrote dataset '" << m.dataset_id << "' with " << m.clips.size()
            << " clips under " << out << "\n";
  save_config_file(cfg, (fs::path(out) / "synth_config.mi2m").string());
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, bool resume) {
  validate_config(cfg);
  if (cfg.dataset_path.empty()) throw ConfigError("pretrain: dataset.path is required");
  std::string out = cfg.resolved_output_dir();
  DirectoryLock lock(out);
  PreparedDataset data = prepare_dataset(cfg.dataset_path, cfg);
  EncoderConfig ec = encoder_config_for(cfg, data.manifest.shapes);

  std::string tok_wifi_path = (fs::path(out) / "tokenizer_wifi.ckpt").string();
  std::string tok_vision_path = (fs::path(out) / "tokenizer_vision.ckpt").string();
  std::string enc_path = (fs::path(out) / "encoder.ckpt").string();
  std::string trace_path = (fs::path(out) / "encoder_loss.csv").string();

  TrainedTokenizers toks;
  bool have_toks = (!ec.wifi_active() || fs::exists(tok_wifi_path)) &&
                   (!ec.vision_active() || fs::exists(tok_vision_path));
  if (resume && have_toks) {
    if (ec.wifi_active()) toks.wifi = load_tokenizer(tok_wifi_path);
    if (ec.vision_active()) toks.vision = load_tokenizer(tok_vision_path);
  } else {
    toks = train_tokenizers(data, cfg, cfg.seed);
    if (ec.wifi_active()) {
      save_tokenizer(toks.wifi, tok_wifi_path, &data.norm);
      std::ofstream tr((fs::path(out) / "tokenizer_wifi_loss.csv").string());
      tr << "step,loss\n";
      for (size_t i = 0; i < toks.wifi_trace.size(); ++i)
        tr << i << "," << fmt_double(toks.wifi_trace[i]) << "\n";
    }
    if (ec.vision_active()) {
      save_tokenizer(toks.vision, tok_vision_path);
      std::ofstream tr((fs::path(out) / "tokenizer_vision_loss.csv").string());
      tr << "step,loss\n";
      for (size_t i = 0; i < toks.vision_trace.size(); ++i)
        tr << i << "," << fmt_double(toks.vision_trace[i]) << "\n";
    }
  }

  int start_epoch = 0;
  EncoderParams resume_params;
  EncoderParams* resume_ptr = nullptr;
  if (resume && fs::exists(enc_path)) {
    int saved_epoch = 0;
    resume_params = load_encoder(enc_path, &saved_epoch);
    if (!(resume_params.cfg.n_wifi == ec.n_wifi && resume_params.cfg.n_vision == ec.n_vision &&
          resume_params.cfg.dim == ec.dim && resume_params.cfg.layers == ec.layers))
      throw ConfigError("resume: encoder checkpoint architecture does not match config");
    start_epoch = saved_epoch + 1;
    resume_ptr = &resume_params;
    if (start_epoch >= cfg.enc_epochs) {
      std::cout << "pretrain: checkpoint already at epoch " << saved_epoch << ", nothing to do\n";
      return 0;
    }
  }

  auto step_trace = [&](int epoch, int step, double loss) {
    append_csv(trace_path, "epoch,step,masked_loss",
               fmt_int(epoch) + "," + fmt_int(step) + "," + fmt_double(loss));
  };
  auto on_epoch = [&](int epoch, EncoderParams& enc) {
    save_encoder(enc, enc_path, epoch, &data.norm);
  };
  std::vector<EpochStats> stats;
  pretrain_encoder(data, toks, cfg, cfg.seed, step_trace, on_epoch, &stats, resume_ptr,
                   start_epoch);
  for (const EpochStats& s : stats)
    std::cout << "epoch " << s.epoch << " masked_loss " << fmt_double(s.mean_loss) << "\n";
  save_config_file(cfg, (fs::path(out) / "pretrain_config.mi2m").string());
  return 0;
}

int cmd_finetune(const RunConfig& cfg) {
  validate_config(cfg);
  if (cfg.dataset_path.empty()) throw ConfigError("finetune: dataset.path is required");
  std::string out = cfg.resolved_output_dir();
  std::string enc_path = (fs::path(out) / "encoder.ckpt").string();
  if (!fs::exists(enc_path))
    throw IoError("finetune: missing encoder checkpoint: " + enc_path);
  DirectoryLock lock(out);
  PreparedDataset data = prepare_dataset(cfg.dataset_path, cfg);
  EncoderConfig ec = encoder_config_for(cfg, data.manifest.shapes);
  EncoderParams enc = load_encoder(enc_path);
  if (enc.cfg.n_wifi != ec.n_wifi || enc.cfg.n_vision != ec.n_vision ||
      enc.cfg.dim != ec.dim)
    throw ConfigError("finetune: encoder checkpoint geometry does not match dataset/config");

  FinetuneResult res = finetune_head(data, enc, cfg, cfg.seed);
  for (int missing : res.budget.missing_classes)
    std::cerr << "warning: no clips available for activity class " << missing << "\n";

  std::string head_path = (fs::path(out) / "head.ckpt").string();
  save_temporal_head(res.head, head_path,
                     {{"task", cfg.ft_task},
                      {"k_act", fmt_int(data.manifest.num_activities)},
                      {"k_subj", fmt_int(data.manifest.num_subjects)},
                      {"seq_len", fmt_int(cfg.ft_seq_len)},
                      {"finetune_clip_ids", join_ids(res.clip_ids)}});
  std::string metrics_path = (fs::path(out) / "finetune_metrics.csv").string();
  std::ofstream ms(metrics_path, std::ios::trunc);
  ms << "epoch,loss,train_acc\n";
  for (const FinetuneEpoch& e : res.metrics)
    ms << e.epoch << "," << fmt_double(e.loss) << "," << fmt_double(e.train_acc) << "\n";
  for (const FinetuneEpoch& e : res.metrics)
    std::cout << "epoch " << e.epoch << " loss " << fmt_double(e.loss) << " train_acc "
              << fmt_double(e.train_acc) << "\n";
  if (!cfg.ft_freeze) save_encoder(enc, enc_path, cfg.enc_epochs - 1, &data.norm);
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  validate_config(cfg);
  std::string out = cfg.resolved_output_dir();
  fs::create_directories(out);

  std::vector<EvalReport> reports;
  if (!cfg.protocol_pretrain_data.empty()) {
    ProtocolSpec spec;
    spec.pretrain_manifest = cfg.protocol_pretrain_data;
    spec.finetune_manifest = cfg.protocol_finetune_data;
    spec.cfg = cfg;
    reports = run_protocol(spec);
  } else {
    if (cfg.dataset_path.empty()) throw ConfigError("eval: dataset.path is required");
    std::string enc_path = (fs::path(out) / "encoder.ckpt").string();
    std::string head_path = (fs::path(out) / "head.ckpt").string();
    if (!fs::exists(enc_path)) throw IoError("eval: missing encoder checkpoint: " + enc_path);
    if (!fs::exists(head_path)) throw IoError("eval: missing head checkpoint: " + head_path);
    PreparedDataset data = prepare_dataset(cfg.dataset_path, cfg);
    EncoderConfig ec = encoder_config_for(cfg, data.manifest.shapes);
    TrainedModel model;
    model.encoder = load_encoder(enc_path, nullptr, &model.norm);
    if (model.encoder.cfg.n_wifi != ec.n_wifi || model.encoder.cfg.n_vision != ec.n_vision ||
        model.encoder.cfg.dim != ec.dim)
      throw ConfigError("eval: encoder checkpoint geometry does not match dataset/config");
    Blob raw;
    model.head = load_temporal_head(head_path, &raw);
    model.geometry = cfg.geometry();
    model.seq_len = static_cast<int>(raw.meta_int("seq_len"));
    model.task = raw.meta_at("task");
    model.k_act = static_cast<int>(raw.meta_int("k_act"));
    model.k_subj = static_cast<int>(raw.meta_int("k_subj"));
    if (raw.has_meta("finetune_clip_ids") && !raw.meta_at("finetune_clip_ids").empty())
      model.finetune_clip_ids = split(raw.meta_at("finetune_clip_ids"), ';');
    if (model.norm.empty()) model.norm = data.norm;
    EvalCondition cond =
        cfg.eval_condition == "dark" ? EvalCondition::dark : EvalCondition::normal;
    EvalReport r = evaluate(model, data.manifest, test_windows(data, model.seq_len), cond,
                            cfg.eval_gamma);
    r.pretrain_dataset = data.manifest.dataset_id;
    r.seeds = {cfg.seed};
    reports.push_back(std::move(r));
  }

  std::string records, tables;
  for (const EvalReport& r : reports) {
    records += render_report_record(r) + "\n";
    tables += render_report_table(r) + "\n";
  }
  write_text_file((fs::path(out) / "eval_report.txt").string(), records + tables);
  std::cout << tables;
  return 0;
}

}  // namespace mi2m
