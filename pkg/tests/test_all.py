#!/usr/bin/env python3
"""
Smoke test: every DCML module imports, agrees on the version and exposes
the operations the CLI and the pipeline depend on.
Run this after installation to ensure everything is set up properly.
"""

import sys
import os
import importlib

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

MODULES = {
    'dcml_shared': ['setup_logging', 'DCMLError', 'RunLog', 'FLAGS', 'format_output'],
    'dcml_tensor': ['Tensor', 'apply_primitive', 'backward', 'precision', 'PRIMITIVES'],
    'dcml_storage': ['encode_tns', 'decode_tns', 'save_checkpoint', 'load_checkpoint'],
    'dcml_nn': ['extract_patches', 'build_backbone', 'encode_patches', 'optimizer_step'],
    'dcml_fusion': ['concat_features', 'fuse', 'fuse_modalities', 'ModalityFusion'],
    'dcml_deaging': ['factorize', 'canonical_correlation', 'deaging_losses', 'adversarial_train'],
    'dcml_race': ['RaceEncoder', 'encode_race', 'race_loss', 'train_race'],
    'dcml_contrastive': ['cosine_similarity', 'momentum_update', 'bank_enqueue', 'build_logits', 'info_nce'],
    'dcml_synth': ['generate_family_dataset', 'make_protocol', 'save_dataset', 'load_dataset'],
    'dcml_eval': ['evaluate_topk', 'EvalReport'],
    'dcml_gradcheck': ['gradcheck_suite'],
    'dcml_config': ['load_config', 'preset'],
    'dcml_pipeline': ['train_pipeline', 'evaluate_checkpoint', 'ablation_run'],
    'dcml_main': ['main'],
}


def test_modules_import_and_expose_operations():
    for name, attrs in MODULES.items():
        module = importlib.import_module(name)
        for attr in attrs:
            assert hasattr(module, attr), f"{name} is missing {attr}"


def test_versions_agree():
    import dcml_shared
    assert dcml_shared.VERSION == "1.0.0", f"Version mismatch: {dcml_shared.VERSION}"
    for name in MODULES:
        doc = importlib.import_module(name).__doc__ or ""
        if "v" in doc and name != 'dcml_shared':
            first = doc.strip().splitlines()[0]
            if first.split()[-1].startswith("v"):
                assert first.split()[-1] == f"v{dcml_shared.VERSION}", f"{name}: {first}"


def main():
    """Run the smoke checks without pytest"""
    print("=" * 50)
    print("DCML Test Suite")
    print("=" * 50)
    ok = True
    for check in (test_modules_import_and_expose_operations, test_versions_agree):
        try:
            check()
            print(f"✓ {check.__name__}")
        except Exception as e:
            print(f"✗ {check.__name__}: {e}")
            ok = False
    print("=" * 50)
    print("✅ All tests passed!" if ok else "❌ Some tests failed. Please check the installation.")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
