# A walk through the synthetic corpus: languages, rendering, splits, sampling.

import numpy as np

from ztrans.corpus import (build_dataset, detect_language, make_languages, pair_probabilities,
                           render, unrender)

vocab = make_languages(4, concept_vocab_size=20)
for lang in vocab.languages:
    print(lang.name, "tag", lang.tag_token, "tokens from", lang.vocab_offset, "order", lang.order_rule)

# one meaning, four surface forms
meaning = [5, 9, 2, 14]
for lang in vocab.languages:
    surface = render(meaning, lang)
    print(f"{lang.name:>3}: {surface}  -> back to {unrender(surface, lang)}")

# every sentence is written in exactly one language's token range
print("detected:", detect_language(render(meaning, vocab.languages[2]), vocab))

data = build_dataset(4, 200, seed=1, valid_per_pair=20, test_per_pair=20)
for split in data.splits:
    pairs = sorted(data.pairs(split))
    print(f"{split:<16} {len(data[split]):>5} examples, directions {pairs}")

ex = data["test_zero_shot"][0]
print("zero-shot example:", ex.source, "tag", ex.tag, "->", ex.target)

# temperature sampling flattens an unbalanced pair mix
counts = np.array([400, 100])
for T in (1, 5, 100):
    print(f"T={T:<3}", np.round(pair_probabilities(counts, T), 4))
