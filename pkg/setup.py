import setuptools

setuptools.setup(
    install_requires=[
        "numpy",
        "omegaconf",
        "PyYAML",
        "einops",
        "tqdm",
        "Pillow",
    ],
)
