# Train vanilla and LoLE+LCLR models on the toy corpus and compare them.
#
#     python demos/toy_experiment.py [steps]
#
# The full 2000-step budget takes about six minutes per model on one core;
# the default of 400 steps gives a quick, rougher picture.

import dataclasses
import sys
import warnings

from ztrans.analysis import evaluate_examples, identity_eval, run_comparison
from ztrans.config import ExperimentConfig
from ztrans.corpus import build_dataset
from ztrans.training import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
warnings.simplefilter("ignore", RuntimeWarning)  # BLEU warns on empty n-gram buckets

base = ExperimentConfig.toy(seed=1).with_overrides([f"max_steps={steps}"])
d = base.data
data = build_dataset(d.num_languages, d.sentences_per_pair, d.seed,
                     valid_per_pair=d.valid_per_pair, test_per_pair=d.test_per_pair)

for variant in ("vanilla", "both"):
    cfg = dataclasses.replace(base, variant=variant)
    model_cfg = cfg.model_config(data.vocab.size, d.num_languages)
    result = train(model_cfg, cfg.train, data)
    params = result.params
    sup = evaluate_examples(params, model_cfg, data["test_supervised"], data.vocab, beam=1)
    zs = evaluate_examples(params, model_cfg, data["test_zero_shot"], data.vocab, beam=1)
    ident = [identity_eval(params, model_cfg, data, lang, beam=1) for lang in range(d.num_languages)]
    print(f"\n{variant}: best valid ce {result.best_valid_ce:.3f} at step {result.best_step}")
    print(f"  supervised  acc {sup.accuracy:.4f}  BLEU {sup.bleu:6.2f}")
    print(f"  zero-shot   acc {zs.accuracy:.4f}  BLEU {zs.bleu:6.2f}  off-target {zs.off_target:.3f}")
    print(f"  identity    BLEU per language {[round(b, 2) for b in ident]}")
    for rep in run_comparison(params, model_cfg, data, "i", 1, 2, layers=range(0, 3)):
        print(f"  case (i) encoder layer {rep.layer}: {rep.mean:.4f}")
