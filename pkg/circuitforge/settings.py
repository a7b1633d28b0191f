import os

import yaml


def load_config(filename="config.yaml"):
    """Load configuration from a YAML file."""
    base_dir = os.path.dirname(__file__)
    filepath = os.path.join(base_dir, filename)
    with open(filepath) as file:
        return yaml.safe_load(file)


# Load the configuration automatically when the module is imported
config = load_config()

default_widths = list(map(int, config["widths"]))
default_layer_spacing = float(config["layer_spacing"])
default_activation = str(config["activation"])
default_seed = int(config["seed"])

regime_defaults = config["regime"]
adam_defaults = {key: float(value) for key, value in config["adam"].items()}

default_k = int(config["discovery"]["k"])
default_edge_epsilon = float(config["discovery"]["edge_epsilon"])

default_n_resamples = int(config["bootstrap"]["n_resamples"])
default_sample_size = int(config["bootstrap"]["sample_size"])

inference_warmup = int(config["inference_warmup"])

# Maps task name to (clean_digit, corrupted_digit)
tasks = {name: (int(pair[0]), int(pair[1])) for name, pair in config["tasks"].items()}
default_tasks = list(config["default_tasks"])

data_files = dict(config["data_files"])

DATA_DIR_ENV = "CIRCUITFORGE_DATA_DIR"
SCHEMA_VERSION = 1
