"""
Train, retrieve and write a report
==================================

A synthetic corpus stands in for chest X-ray studies: every finding has a
fixed visual signature, and a view's token grid is the noisy sum of the
signatures of the findings it shows. The decoder learns to predict the
phrases of those findings; retrieval maps its predictions onto a phrase
index, and the retrieved phrases fill a report prompt.
"""

import numpy as np

from rarrg.compose import MockClient
from rarrg.decoder import DecoderConfig
from rarrg.embedding import HashEmbeddingProvider
from rarrg.index import build_index
from rarrg.losses import LossConfig
from rarrg.metrics import bleu, rouge_l
from rarrg.pipeline import report_for_study, retrieval_f1
from rarrg.trainer import SyntheticCorpusConfig, TrainConfig, generate_corpus, train

corpus = SyntheticCorpusConfig(num_findings=12, signature_dim=16, n_train=1000, n_val=100, n_test=100,
                               mean_phrases=4.0, views_per_study=2, seed=0)
train_set, val_set, test_set, bank = generate_corpus(corpus)
print(len(train_set), "training studies; first study phrases:", train_set[0].phrases)

dec = DecoderConfig(N=12, L=2, d_model=64, heads=8, d_embed=32, d_visual=16, d_ff=128)
provider = HashEmbeddingProvider(dec.d_embed)
result = train(train_set, val_set, dec, LossConfig(pos_class_size=4.0),
               TrainConfig(learning_rate=1e-3, batch_size=32, max_epochs=10, warmup_steps=20, seed=0), provider,
               progress=lambda row: print("epoch {epoch}: train {train_loss:.3f}  val {val_loss:.3f}".format(**row)))

# the index holds every phrase seen in training
index = build_index([p for s in train_set for p in s.phrases], provider)
print(len(index), "indexed phrases")

# higher thresholds keep fewer phrases
for row in retrieval_f1(test_set, result.params, dec, index, np.linspace(0.0, 1.0, 6)):
    print("threshold {threshold:.1f}: F1 {example_f1:.3f}, {mean_count:.2f} phrases".format(**row))

# Two-view studies use the multi-view prompt; frontal phrases win conflicts.
study = next(s for s in test_set if len(s.views) == 2)
report, views = report_for_study(study, result.params, dec, index, client=MockClient())
for position, res in views.items():
    print(position, res.phrases)
print(report.template_id, "->", report.text)

reference = " ".join(p.capitalize() + "." for p in study.phrases)
print("BLEU-1 %.3f  ROUGE-L %.3f" % (bleu([report.text], [reference], 1), rouge_l(report.text, reference)))
