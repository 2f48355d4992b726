"""
From entity annotations to key phrases
======================================

A report sentence is annotated with entities and relations. Entities joined
by ``modify`` edges form one graph, and each graph becomes one key phrase.
Absent findings get a "no" prefix and uncertain ones a "maybe" prefix.
"""

from rarrg.compose import build_extraction_prompt
from rarrg.phrase_graph import extract_radgraph_phrases

# "Mild enlargement of the cardiac silhouette. No pleural effusion. Possible left basilar atelectasis."
doc = {
    "id": "demo",
    "entities": [
        {"id": "e1", "tokens": "Mild", "start": 0, "label": "OBS-DP"},
        {"id": "e2", "tokens": "enlargement", "start": 1, "label": "OBS-DP"},
        {"id": "e3", "tokens": "cardiac", "start": 4, "label": "ANAT-DP"},
        {"id": "e4", "tokens": "silhouette", "start": 5, "label": "ANAT-DP"},
        {"id": "e5", "tokens": "pleural", "start": 8, "label": "OBS-DA"},
        {"id": "e6", "tokens": "effusion", "start": 9, "label": "OBS-DA"},
        {"id": "e7", "tokens": "left", "start": 12, "label": "ANAT-DP"},
        {"id": "e8", "tokens": "basilar", "start": 13, "label": "ANAT-DP"},
        {"id": "e9", "tokens": "atelectasis", "start": 14, "label": "OBS-U"},
    ],
    "relations": [
        {"source": "e1", "target": "e2", "kind": "modify"},
        {"source": "e3", "target": "e4", "kind": "modify"},
        # located_at links a finding to anatomy but does not merge the graphs
        {"source": "e2", "target": "e4", "kind": "located_at"},
        {"source": "e5", "target": "e6", "kind": "modify"},
        {"source": "e7", "target": "e8", "kind": "modify"},
        {"source": "e8", "target": "e9", "kind": "modify"},
    ],
}

phrases = extract_radgraph_phrases(doc)
for p in phrases:
    print("-", p)

# The rule-based phrases seed an extraction prompt for a language model,
# which rewrites them into richer clinical phrases.
report = "Mild enlargement of the cardiac silhouette. No pleural effusion. Possible left basilar atelectasis."
prompt = build_extraction_prompt(report, phrases)
print()
print(prompt.user)
