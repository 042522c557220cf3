import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml
from jsonschema import Draft202012Validator, ValidationError, validators
from platformdirs import site_config_path, user_config_path, user_data_dir
from pyaml_env import parse_config

from evofed.fitness_codec import CodecScheme
from evofed.logger import get_logger
from evofed.nn_core import OptimizerCfg

programName = "evofed"
logger = get_logger(programName)

METHODS = ["evofed", "fedavg", "fed-sparse", "fed-quant", "plain-es"]


def extend_with_default(validator_class):
    validate_properties = validator_class.VALIDATORS["properties"]

    def set_defaults(validator, properties, instance, schema):
        for property, subschema in properties.items():
            if "default" in subschema:
                instance.setdefault(property, copy.deepcopy(subschema["default"]))

        for error in validate_properties(
            validator,
            properties,
            instance,
            schema,
        ):
            yield error

    return validators.extend(
        validator_class,
        {"properties": set_defaults},
    )


DefaultValidatingValidator = extend_with_default(Draft202012Validator)


class findConfigFileException(Exception):
    pass


class prettyValidationError(ValidationError):
    pass


def _section(
    properties: Dict[str, Any], description: str, required: Sequence[str] = ()
) -> Dict[str, Any]:
    section = {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
        "description": description,
        "default": {},  # required for defaults inside object to get applied
    }
    if required:
        section["required"] = list(required)
    return section


def _decay(what: str) -> Dict[str, Any]:
    return {
        "decayFactor": {
            "type": "number",
            "exclusiveMinimum": 0,
            "maximum": 1,
            "default": 1.0,
            "description": f"Factor the {what} is multiplied with every 'decayEvery' rounds.",
        },
        "decayEvery": {
            "type": "integer",
            "minimum": 0,
            "default": 0,
            "description": f"Number of rounds between two decays of the {what}. 0 keeps it constant.",
        },
    }


# schema of the experiment config file
schema = {
    "type": "object",
    "properties": {
        "method": {
            "type": "string",
            "enum": METHODS,
            "description": "Training method: 'evofed' encodes local updates as population fitness, the others are the comparison baselines (plain FedAvg, FedAvg with top-k sparsified updates, FedAvg with quantized updates and plain evolution strategies on the task loss).",
        },
        "seeds": _section(
            {
                "protocol": {
                    "type": "integer",
                    "minimum": 0,
                    "default": 42,
                    "description": "Base seed shared by the server and all clients. Every round's perturbation population, participant choice and local minibatch order derive from it.",
                },
                "data": {
                    "type": "integer",
                    "minimum": 0,
                    "default": 7,
                    "description": "Seed of the synthetic data, the train/test split and the client sharding.",
                },
                "model": {
                    "type": "integer",
                    "minimum": 0,
                    "default": 1,
                    "description": "Seed of the initial model weights.",
                },
            },
            "Seeds that make a run reproducible.",
        ),
        "dataset": _section(
            {
                "kind": {
                    "type": "string",
                    "enum": ["blobs", "idx"],
                    "default": "blobs",
                    "description": "'blobs' draws Gaussian clusters, 'idx' loads MNIST-style IDX files (optionally gzip compressed).",
                },
                "samples": {"type": "integer", "minimum": 1, "default": 2000, "description": "Number of synthetic samples (blobs only)."},
                "features": {"type": "integer", "minimum": 1, "default": 2, "description": "Number of synthetic features (blobs only)."},
                "classes": {"type": "integer", "minimum": 2, "default": 4, "description": "Number of synthetic classes (blobs only)."},
                "spread": {"type": "number", "minimum": 0, "default": 0.05, "description": "Standard deviation of every cluster around its center (blobs only)."},
                "testFraction": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "exclusiveMaximum": 1,
                    "default": 0.2,
                    "description": "Share of the synthetic samples held out for testing (blobs only).",
                },
                "trainImages": {"type": "string", "description": "Path of the IDX training images (idx only)."},
                "trainLabels": {"type": "string", "description": "Path of the IDX training labels (idx only)."},
                "testImages": {"type": "string", "description": "Path of the IDX test images (idx only)."},
                "testLabels": {"type": "string", "description": "Path of the IDX test labels (idx only)."},
                "subset": {
                    "type": ["integer", "null"],
                    "minimum": 1,
                    "default": None,
                    "description": "If set, only the first 'subset' training samples are used (idx only).",
                },
                "center": {"type": "boolean", "default": False, "description": "Shift every pixel feature to zero mean (idx only)."},
            },
            "Training and test data.",
        ),
        "model": _section(
            {
                "hidden": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "default": [16],
                    "description": "Widths of the hidden layers of the MLP. An empty list gives a linear softmax classifier.",
                },
                "activation": {
                    "type": "string",
                    "enum": ["relu", "tanh", "identity"],
                    "default": "relu",
                    "description": "Activation of the hidden layers.",
                },
            },
            "Architecture of the shared model.",
        ),
        "clients": _section(
            {
                "count": {"type": "integer", "minimum": 1, "maximum": 4294967295, "default": 5, "description": "Number of clients M."},
                "classesPerClient": {
                    "type": "integer",
                    "minimum": 1,
                    "default": 2,
                    "description": "Number of distinct labels each client's shard contains.",
                },
                "participation": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "maximum": 1,
                    "default": 1.0,
                    "description": "Share of the clients taking part in every round. Absent clients catch up when they next take part.",
                },
                "workers": {
                    "type": "integer",
                    "minimum": 1,
                    "default": 1,
                    "description": "Number of threads the clients of a round run on. Results do not depend on it.",
                },
            },
            "Simulated clients.",
        ),
        "rounds": _section(
            {
                "count": {"type": "integer", "minimum": 1, "default": 300, "description": "Number of communication rounds T."},
                "evalInterval": {
                    "type": "integer",
                    "minimum": 1,
                    "default": 10,
                    "description": "The global model is evaluated every 'evalInterval' rounds and after the last one.",
                },
                "targetAccuracies": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0, "maximum": 1},
                    "default": [0.5, 0.7, 0.8, 0.9, 0.95],
                    "description": "Accuracies for which the summary reports the uplink bytes spent until they were first reached.",
                },
            },
            "Communication rounds.",
        ),
        "optimizer": _section(
            {
                "learningRate": {"type": "number", "minimum": 0, "default": 0.0873, "description": "Learning rate of local SGD."},
                "momentum": {
                    "type": "number",
                    "minimum": 0,
                    "exclusiveMaximum": 1,
                    "default": 0.9074,
                    "description": "Heavy-ball momentum of local SGD. The buffer is reset every round.",
                },
                "weightDecay": {"type": "number", "minimum": 0, "default": 0.0, "description": "L2 weight decay of local SGD."},
                "localSteps": {"type": "integer", "minimum": 1, "default": 10, "description": "Local SGD steps per round."},
                "batchSize": {"type": "integer", "minimum": 1, "default": 256, "description": "Minibatch size of local SGD."},
                **_decay("local learning rate"),
            },
            "Local training on every client.",
        ),
        "evolution": _section(
            {
                "populationSize": {
                    "type": "integer",
                    "minimum": 2,
                    "maximum": 65535,
                    "multipleOf": 2,
                    "default": 128,
                    "description": "Population size N. Members come in mirrored pairs, so N has to be even.",
                },
                "sigma": {"type": "number", "exclusiveMinimum": 0, "default": 0.27, "description": "Perturbation scale sigma."},
                "learningRate": {
                    "type": "number",
                    "minimum": 0,
                    "default": 0.0427,
                    "description": "Learning rate alpha with which the global fitness is decoded into an update.",
                },
                "partitions": {
                    "type": "integer",
                    "minimum": 1,
                    "maximum": 65535,
                    "default": 1,
                    "description": "Number of parameter partitions K, each encoded with its own fitness column.",
                },
                "momentum": {
                    "type": "number",
                    "minimum": 0,
                    "exclusiveMaximum": 1,
                    "default": 0.0,
                    "description": "Momentum on the decoded update, applied identically by every node.",
                },
                **_decay("decode learning rate"),
                "historyDepth": {
                    "type": "integer",
                    "minimum": 0,
                    "default": 10,
                    "description": "Number of past global fitness matrices kept for catching up absent clients. Clients absent for longer receive the full model.",
                },
                "streaming": {
                    "type": "boolean",
                    "default": False,
                    "description": "Generate perturbations pair by pair instead of caching the whole population. Slower, but needs memory for one perturbation only.",
                },
            },
            "Population-based gradient encoding (evofed and plain-es).",
        ),
        "codec": _section(
            {
                "scheme": {
                    "type": "string",
                    "enum": ["raw32", "topk", "quant", "rank"],
                    "default": "raw32",
                    "description": "Wire encoding of the fitness matrices clients upload.",
                },
                "topK": {"type": "integer", "minimum": 1, "default": 8, "description": "Members kept per column by 'topk'."},
                "bits": {"type": "integer", "minimum": 1, "maximum": 16, "default": 8, "description": "Bits per value of 'quant'."},
                "rankGroups": {"type": "integer", "minimum": 1, "default": 8, "description": "Number of rank groups of 'rank'."},
            },
            "Fitness compression.",
        ),
        "baseline": _section(
            {
                "compressionRate": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "exclusiveMaximum": 1,
                    "default": 0.988,
                    "description": "Share of the update components fed-sparse drops.",
                },
                "bits": {"type": "integer", "minimum": 1, "maximum": 16, "default": 8, "description": "Bits per update component of fed-quant."},
            },
            "Settings of the compressed FedAvg baselines.",
        ),
        "output": _section(
            {
                "directory": {
                    "type": "string",
                    "default": str(Path(user_data_dir(appname=programName)) / "runs" / "default"),
                    "description": "Directory rounds.csv and summary.json are written to. If the EVOFED_OUTPUT_ROOT environment variable is set, the run goes to a directory of the same name below it instead.",
                },
            },
            "Where results go.",
        ),
    },
    "required": ["method"],
    "additionalProperties": False,
}


def _yaml_line(text: Optional[str], path: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the node at ``path`` (or of its deepest existing ancestor)."""
    if not text:
        return None
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            matches = [(k, v) for k, v in node.value if k.value == key]
            if not matches:
                break
            key_node, node = matches[0]
            line = key_node.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def _option_name(path: Sequence[Union[str, int]]) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _where(text: Optional[str], path: Sequence[Union[str, int]]) -> str:
    line = _yaml_line(text, path)
    return f" (line {line})" if line is not None else ""


def _pretty(exc: ValidationError, text: Optional[str]) -> str:
    path = list(exc.absolute_path)
    if exc.validator == "required":
        return (
            f"A required option is missing from your config.yml file{_where(text, path)}:\n"
            + exc.message
            + "\nPlease make sure to define this option. Maybe you made a typo?"
        )
    if exc.validator == "additionalProperties":
        extra = [key for key in exc.instance if key not in exc.schema.get("properties", {})]
        return (
            f"An undefined option has been found in your config.yml file{_where(text, path + extra[:1])}:\n"
            + exc.message
            + "\nPlease remove this option from your config. Maybe you made a typo?"
        )
    return (
        f"The option '{_option_name(path)}' in your config.yml file{_where(text, path)} has an invalid value:\n"
        + exc.message
        + "\nPlease adjust this value. Maybe you made a typo?"
    )


def _fail(msg: str):
    logger.error(msg)
    raise prettyValidationError(msg)


def _semantic_checks(config: Dict, text: Optional[str]):
    """Cross-option constraints jsonschema cannot express."""

    def invalid(path: List[str], problem: str):
        _fail(
            f"The option '{_option_name(path)}' in your config.yml file{_where(text, path)} has an invalid value:\n"
            + problem
        )

    evolution, codec, dataset = config["evolution"], config["codec"], config["dataset"]
    population = evolution["populationSize"]
    if codec["scheme"] == "topk" and codec["topK"] > population:
        invalid(["codec", "topK"], f"topK={codec['topK']} exceeds the population size {population}")
    if codec["scheme"] == "rank" and codec["rankGroups"] > population:
        invalid(
            ["codec", "rankGroups"],
            f"rankGroups={codec['rankGroups']} exceeds the population size {population}",
        )
    if config["method"] == "plain-es" and evolution["partitions"] != 1:
        invalid(
            ["evolution", "partitions"],
            "plain-es evaluates one task loss per member and needs partitions: 1",
        )
    if dataset["kind"] == "blobs":
        if config["clients"]["classesPerClient"] > dataset["classes"]:
            invalid(
                ["clients", "classesPerClient"],
                f"{config['clients']['classesPerClient']} classes per client but the dataset has {dataset['classes']}",
            )
        if dataset["samples"] < dataset["classes"]:
            invalid(
                ["dataset", "samples"],
                f"{dataset['samples']} samples cannot cover {dataset['classes']} classes",
            )
        widths = [dataset["features"], *config["model"]["hidden"], dataset["classes"]]
        num_params = sum(a * b + b for a, b in zip(widths, widths[1:]))
        if evolution["partitions"] > num_params:
            invalid(
                ["evolution", "partitions"],
                f"{evolution['partitions']} partitions for a model of {num_params} parameters",
            )
    else:
        for key in ("trainImages", "trainLabels", "testImages", "testLabels"):
            if key not in dataset:
                _fail(
                    f"A required option is missing from your config.yml file{_where(text, ['dataset'])}:\n"
                    f"'dataset.{key}' is required when 'dataset.kind' is 'idx'"
                )


def findConfigFile(additionalPaths: List[Path] = []) -> Path:
    defaultSearchDirs = [
        user_config_path(appname=programName),
        site_config_path(appname=programName),
        Path(__file__).parent,
        Path.cwd(),
    ]
    searchDirs = additionalPaths + defaultSearchDirs

    for dir in searchDirs:
        configDir = dir / "config.yml"
        if configDir.is_file():
            logger.info("Trying to load config from: " + str(configDir))
            return configDir
    raise findConfigFileException(
        "couldn't find a config.yml file in any search directory. Please add one"
    )


def validateConfig(config: Dict, text: Optional[str] = None) -> Dict:
    """
    Fills in defaults and validates ``config`` in place. ``text`` is the YAML source and is
    used to point error messages at a line.
    """
    if not isinstance(config, dict):
        _fail("Your config.yml file has to be a mapping of options")
    try:
        DefaultValidatingValidator(schema).validate(config)
    except ValidationError as exc:
        msg = _pretty(exc, text)
        logger.exception(msg)
        raise prettyValidationError(msg)
    _semantic_checks(config, text)
    return config


def loadConfig(configPath: Optional[Union[str, Path]] = None) -> Dict:
    configPath = Path(configPath) if configPath is not None else findConfigFile()
    text = configPath.read_text()
    try:
        config = parse_config(str(configPath))
    except yaml.YAMLError as exc:
        _fail(f"could not parse {configPath} as YAML: {exc}")
    validateConfig(config, text)
    logger.info("successfully loaded config from: " + str(configPath))
    return config


@dataclass(frozen=True)
class DatasetCfg:
    kind: str = "blobs"
    samples: int = 2000
    features: int = 2
    classes: int = 4
    spread: float = 0.05
    test_fraction: float = 0.2
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    subset: Optional[int] = None
    center: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    dataset: DatasetCfg = DatasetCfg()
    protocol_seed: int = 42
    data_seed: int = 7
    model_seed: int = 1
    hidden: Tuple[int, ...] = (16,)
    activation: str = "relu"
    num_clients: int = 5
    classes_per_client: int = 2
    participation: float = 1.0
    workers: int = 1
    rounds: int = 300
    eval_interval: int = 10
    target_accuracies: Tuple[float, ...] = (0.5, 0.7, 0.8, 0.9, 0.95)
    optimizer: OptimizerCfg = OptimizerCfg()
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0
    population: int = 128
    sigma: float = 0.27
    alpha: float = 0.0427
    partitions: int = 1
    es_momentum: float = 0.0
    alpha_decay_factor: float = 1.0
    alpha_decay_every: int = 0
    history_depth: int = 10
    streaming: bool = False
    codec: CodecScheme = CodecScheme()
    compression_rate: float = 0.988
    baseline_bits: int = 8
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, config: Dict) -> "ExperimentConfig":
        """Builds the typed config from a validated config dict."""
        ds, opt, evo, codec = (
            config["dataset"],
            config["optimizer"],
            config["evolution"],
            config["codec"],
        )
        scheme_param = {
            "raw32": 0,
            "topk": codec["topK"],
            "quant": codec["bits"],
            "rank": codec["rankGroups"],
        }
        return cls(
            method=config["method"],
            dataset=DatasetCfg(
                kind=ds["kind"],
                samples=ds["samples"],
                features=ds["features"],
                classes=ds["classes"],
                spread=float(ds["spread"]),
                test_fraction=float(ds["testFraction"]),
                train_images=ds.get("trainImages"),
                train_labels=ds.get("trainLabels"),
                test_images=ds.get("testImages"),
                test_labels=ds.get("testLabels"),
                subset=ds["subset"],
                center=ds["center"],
            ),
            protocol_seed=config["seeds"]["protocol"],
            data_seed=config["seeds"]["data"],
            model_seed=config["seeds"]["model"],
            hidden=tuple(config["model"]["hidden"]),
            activation=config["model"]["activation"],
            num_clients=config["clients"]["count"],
            classes_per_client=config["clients"]["classesPerClient"],
            participation=float(config["clients"]["participation"]),
            workers=config["clients"]["workers"],
            rounds=config["rounds"]["count"],
            eval_interval=config["rounds"]["evalInterval"],
            target_accuracies=tuple(float(a) for a in config["rounds"]["targetAccuracies"]),
            optimizer=OptimizerCfg(
                learning_rate=float(opt["learningRate"]),
                momentum=float(opt["momentum"]),
                weight_decay=float(opt["weightDecay"]),
                local_steps=opt["localSteps"],
                batch_size=opt["batchSize"],
            ),
            lr_decay_factor=float(opt["decayFactor"]),
            lr_decay_every=opt["decayEvery"],
            population=evo["populationSize"],
            sigma=float(evo["sigma"]),
            alpha=float(evo["learningRate"]),
            partitions=evo["partitions"],
            es_momentum=float(evo["momentum"]),
            alpha_decay_factor=float(evo["decayFactor"]),
            alpha_decay_every=evo["decayEvery"],
            history_depth=evo["historyDepth"],
            streaming=evo["streaming"],
            codec=CodecScheme(codec["scheme"], scheme_param[codec["scheme"]]),
            compression_rate=float(config["baseline"]["compressionRate"]),
            baseline_bits=config["baseline"]["bits"],
            output_dir=config["output"]["directory"],
        )
