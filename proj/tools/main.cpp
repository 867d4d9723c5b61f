#include <iostream>

#include <CLI11.hpp>

#include "samplernn/cli.hpp"

using namespace samplernn;

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical sample-level audio model"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train from a config file");
  t->add_option("--config", train.config, "config file")->required();
  t->add_option("--out", train.out, "output directory (overrides `out`)");
  t->add_option("--seed", train.seed, "training seed");
  t->add_option("--max-steps", train.max_steps);
  t->add_flag("--resume", train.resume, "continue from <out>/last.ckpt");
  t->add_option("--set", train.overrides, "key=value override")->take_all();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "print NLL in bits/sample");
  e->add_option("--ckpt", eval.ckpt)->required();
  e->add_option("--config", eval.config, "config whose data section is evaluated");
  e->add_option("--manifest", eval.manifest, "corpus manifest");
  e->add_option("--split", eval.split)->check(CLI::IsMember({"train", "valid", "test"}));
  e->add_option("--length", eval.length, "subsequence length");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "sample audio to a WAV file");
  g->add_option("--ckpt", gen.ckpt)->required();
  g->add_option("--out", gen.out)->required();
  g->add_option("--seconds", gen.seconds);
  g->add_option("--seed", gen.seed);
  g->add_option("--silence-at", gen.silence_at, "seconds");
  g->add_option("--silence-len", gen.silence_len, "seconds");
  g->add_option("--temperature", gen.temperature);

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe", "speaker consistency across injected silence");
  p->add_option("--ckpt", probe.ckpt)->required();
  p->add_option("--runs", probe.options.runs);
  p->add_option("--seed", probe.options.seed);
  p->add_option("--seconds", probe.options.seconds);
  p->add_option("--silence-at", probe.options.silence_at);
  p->add_option("--silence-len", probe.options.silence_len);
  p->add_option("--window", probe.options.window);
  p->add_option("--f0-a", probe.options.f0_a);
  p->add_option("--f0-b", probe.options.f0_b);
  p->add_option("--temperature", probe.options.temperature);
  p->add_option("--threads", probe.options.threads);
  p->add_option("--out", probe.table, "per-run TSV");

  MakeSynthArgs synth;
  auto* s = app.add_subcommand("make-synth", "write a synthetic WAV corpus and manifest");
  s->add_option("kind", synth.kind)->required()->check(CLI::IsMember({"sine", "markov", "two-speaker"}));
  s->add_option("--out", synth.out)->required();
  s->add_option("--seed", synth.seed);
  s->add_option("--config", synth.config);
  s->add_option("--set", synth.overrides, "data key=value")->take_all();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "float64 finite-difference suite");
  c->add_option("--instances", gc.instances);
  c->add_option("--seed", gc.seed);
  c->add_flag("--tanh-fault", gc.tanh_fault);
  c->add_option("--case", gc.cases)->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  auto& out = std::cout;
  auto& err = std::cerr;
  return guarded(
      [&] {
        if (t->parsed()) return cmd_train(train, out, err);
        if (e->parsed()) return cmd_eval(eval, out, err);
        if (g->parsed()) return cmd_generate(gen, out, err);
        if (p->parsed()) return cmd_probe(probe, out, err);
        if (s->parsed()) return cmd_make_synth(synth, out, err);
        return cmd_gradcheck(gc, out, err);
      },
      err);
}
