import pytest

from ccd_exporter.export import ExportJob, export_dataset
from ccd_exporter.toy import make_toy_images

CLASSES = ["cat", "dog", "horse"]


@pytest.fixture(scope="session")
def toy_export(tmp_path_factory):
    """Three toy images for three classes, exported with the builtin encoder."""
    images = tmp_path_factory.mktemp("toy_images")
    make_toy_images(images, CLASSES)
    out = tmp_path_factory.mktemp("toy_export")
    job = ExportJob(image_dir=images, class_names=CLASSES, out_dir=out)
    manifest = export_dataset(job)
    return {"images": images, "out": out, "manifest": manifest, "job": job}
