"""Dataset exporter and crop-embedding server for the ccd engine.

Owns all image-space work: decoding, resizing, augmentation, and encoding.
Writes the engine's manifest + CCDT tensor layout and serves wire protocol v1
for crop-embedding requests.
"""

__version__ = "0.1.0"
