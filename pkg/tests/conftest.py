import numpy as np
import pytest

from restocnet.data_io import write_idx


def digits_28():
    """The bundled 8x8 handwritten digits, scaled to 0..255 and upsampled to 28x28."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    big = np.kron(images, np.ones((3, 3), dtype=np.uint8))
    big = np.pad(big, ((0, 0), (2, 2), (2, 2)))
    return big, digits.target.astype(np.uint8)


@pytest.fixture(scope="session")
def digits():
    return digits_28()


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory, digits):
    """MNIST-format directory: 1500 training and 297 test digits."""
    images, labels = digits
    root = tmp_path_factory.mktemp("digits_idx")
    write_idx(root / "train-images-idx3-ubyte", images[:1500])
    write_idx(root / "train-labels-idx1-ubyte", labels[:1500])
    write_idx(root / "t10k-images-idx3-ubyte", images[1500:])
    write_idx(root / "t10k-labels-idx1-ubyte", labels[1500:])
    return root


def small_mnist_config(train_limit=200, test_limit=60, epochs=3):
    """mnist-16c3 shrunk so the whole CLI pipeline runs in seconds."""
    from dataclasses import replace

    from restocnet.config import preset

    cfg = preset("mnist-16c3")
    spec = replace(cfg.topology.layers[0], train_count=100, batch_size=50)
    topo = replace(cfg.topology, layers=[spec], t_sim_ms=30.0)
    fc = replace(cfg.fcsnn, n_neurons=8, duration_ms=40.0, train_count=40)
    return replace(cfg, topology=topo, train_limit=train_limit, test_limit=test_limit,
                   classifier=replace(cfg.classifier, epochs=epochs, batch_size=32), fcsnn=fc)


@pytest.fixture
def small_config_file(tmp_path):
    from restocnet.config import save_config

    path = tmp_path / "small.ini"
    save_config(small_mnist_config(), path)
    return path


ACCEPTANCE_LINES = []


def record_criterion(label, passed: bool, detail: str) -> bool:
    line = f"criterion {str(label):>3}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
