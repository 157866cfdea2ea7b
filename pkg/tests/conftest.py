from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import pytest
import torch
from hypothesis import settings

from clism.aligner import read_pharaoh
from clism.corpus_io import Vocabulary, build_vocabulary, load_parallel_corpus
from clism.encoder import ModelConfig
from clism.span_pipeline import ClismInstance, Gazetteer, InstanceConfig, build_dataset
from clism.synthetic import write_synthetic

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@dataclass
class TinyCorpus:
    paths: Dict[str, Path]
    vocab: Vocabulary
    instances: List[ClismInstance]
    model_config: ModelConfig


@pytest.fixture(scope="session")
def tiny(tmp_path_factory) -> TinyCorpus:
    """A small synthetic corpus with gold alignments and a matching tiny model."""
    out = tmp_path_factory.mktemp("tiny")
    paths = write_synthetic(out, pairs=200, vocab_size=60, seed=3, qa_train=32, qa_test=16, ner_train=24, ner_test=8)
    vocab = build_vocabulary([paths[k] for k in ("parallel", "heldout", "qa_train", "qa_test", "ner_train", "ner_test")])
    pairs = load_parallel_corpus(paths["parallel"], vocab)
    aligns = read_pharaoh(paths["alignments"].read_text(encoding="utf-8"))
    instances, _ = build_dataset(pairs, aligns, vocab, seed=0, gazetteer=Gazetteer.load(paths["gazetteer"]), config=InstanceConfig(max_length=48))
    cfg = ModelConfig(vocab_size=vocab.size, layers=1, hidden=16, heads=2, max_length=48)
    return TinyCorpus(paths, vocab, instances, cfg)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines recorded by tests/test_acceptance.py."""
    lines = []
    for key in ("passed", "failed"):
        for report in terminalreporter.stats.get(key, []):
            if report.when == "call":
                lines += [v for k, v in report.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
