"""DCML kinship: unsupervised kinship retrieval with de-aged and race-aware contrastive embeddings"""
