import argparse
import logging
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from controllers.ablation_controller import AblationController, parse_grid
from controllers.evaluation_controller import EvaluationController
from controllers.feature_controller import FeatureController
from controllers.phantom_controller import PhantomController
from controllers.registration_controller import RegistrationController
from models.config_model import SOFTWARE_NAME, SOFTWARE_VERSION, ParameterMap, parse_override
from models.errors import ConfigurationError, RegistrationError
from models.io_model import ReportWriter, load_config, read_landmarks, read_mask, read_parameters, read_volume
from models.phantom_model import PhantomSettings
from views.report_view import TraceLogger, format_table

EXIT_OK = 0
EXIT_UNEXPECTED = 1

# phantom flag -> parameter key
PHANTOM_FLAGS = {
    "extent": "PhantomExtent",
    "spacing": "PhantomSpacing",
    "grid_spacing": "DeformationGridSpacing",
    "max_displacement": "MaximumDisplacement",
    "gamma": "Gamma",
    "bias": "BiasAmplitude",
    "noise": "NoiseSigma",
    "truncation": "TruncationMargin",
    "seed": "RandomSeed",
}


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--params", help="parameter file of (Key value ...) entries")
    parser.add_argument("--seed", type=int, help="random seed (RandomSeed)")
    parser.add_argument("--threads", type=int, help="worker threads (Threads)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one parameter, repeatable"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=SOFTWARE_NAME, description="Feature-based deformable image registration")
    parser.add_argument("--version", action="version", version=f"{SOFTWARE_NAME} {SOFTWARE_VERSION}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    register = commands.add_parser("register", help="register a moving image to a fixed image")
    register.add_argument("fixed")
    register.add_argument("moving")
    register.add_argument("--fixed-mask")
    register.add_argument("--moving-mask")
    register.add_argument("--out-dir", required=True)
    _add_config_flags(register)

    evaluate = commands.add_parser("evaluate", help="TRE, Dice, HD95 and Jacobian summary of a transform")
    evaluate.add_argument("--transform", help="transform.txt or its directory; identity when omitted")
    evaluate.add_argument("--landmarks-fixed")
    evaluate.add_argument("--landmarks-moving")
    evaluate.add_argument("--labels-fixed", nargs="+", default=[])
    evaluate.add_argument("--labels-moving", nargs="+", default=[])
    evaluate.add_argument("--reference", help="image whose grid the Jacobian determinant is summarised on")
    evaluate.add_argument("--out-dir")

    phantom = commands.add_parser("phantom", help="write a synthetic pair with a known deformation")
    phantom.add_argument("--out-dir", required=True)
    phantom.add_argument("--params", help="phantom parameter file")
    phantom.add_argument("--extent", type=float)
    phantom.add_argument("--spacing", type=float)
    phantom.add_argument("--grid-spacing", type=float)
    phantom.add_argument("--max-displacement", type=float)
    phantom.add_argument("--gamma", type=float)
    phantom.add_argument("--bias", type=float)
    phantom.add_argument("--noise", type=float)
    phantom.add_argument("--truncation", type=float)
    phantom.add_argument("--seed", type=int)

    features = commands.add_parser("features", help="precompute dense feature maps or validate external ones")
    features.add_argument("image", nargs="?")
    features.add_argument("--mask", help="restricts the PCA fit")
    features.add_argument("--prefix", default="features")
    features.add_argument("--out-dir")
    features.add_argument("--validate", action="store_true", help="check FeatureMapFixed/Moving against the images")
    features.add_argument("--fixed")
    features.add_argument("--moving")
    _add_config_flags(features)

    ablate = commands.add_parser("ablate", help="register under a grid of settings and tabulate TRE")
    ablate.add_argument("fixed")
    ablate.add_argument("moving")
    ablate.add_argument("--landmarks-fixed", required=True)
    ablate.add_argument("--landmarks-moving", required=True)
    ablate.add_argument("--fixed-mask")
    ablate.add_argument("--moving-mask")
    ablate.add_argument("--grid", nargs="+", required=True, metavar="AXIS=V1,V2")
    ablate.add_argument("--seeds", nargs="+", type=int, default=[])
    ablate.add_argument("--out-dir", required=True)
    _add_config_flags(ablate)
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, List[str]]:
    """--set entries first, then the dedicated flags, which win"""
    overrides: Dict[str, List[str]] = {}
    for entry in args.set:
        key, values = parse_override(entry)
        overrides[key] = values
    if args.seed is not None:
        overrides["RandomSeed"] = [str(args.seed)]
    if args.threads is not None:
        overrides["Threads"] = [str(args.threads)]
    return overrides


class MainController:
    """Command-line front end: parses arguments, dispatches, maps failures to exit codes"""

    def __init__(self):
        self.parser = build_parser()
        self.commands = {
            "register": self.cmd_register,
            "evaluate": self.cmd_evaluate,
            "phantom": self.cmd_phantom,
            "features": self.cmd_features,
            "ablate": self.cmd_ablate,
        }

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        self._configure_logging(args)
        try:
            return self.commands[args.command](args)
        except RegistrationError as e:
            logging.error(f"{args.command} failed: {e}")
            return e.exit_code
        except Exception as e:
            logging.error(f"Unexpected error in {args.command}: {e}")
            logging.error(traceback.format_exc())
            return EXIT_UNEXPECTED

    @staticmethod
    def _configure_logging(args: argparse.Namespace):
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.getLogger().setLevel(level)

    def cmd_register(self, args: argparse.Namespace) -> int:
        config = load_config(args.params, collect_overrides(args))
        # Every input is read before anything is written
        fixed = read_volume(args.fixed)
        moving = read_volume(args.moving)
        fixed_mask = read_mask(args.fixed_mask, fixed) if args.fixed_mask else None
        moving_mask = read_mask(args.moving_mask, moving) if args.moving_mask else None

        controller = RegistrationController(config)
        controller.add_observer(TraceLogger())
        result = controller.register(fixed, moving, fixed_mask, moving_mask)
        inputs = {"fixed": args.fixed, "moving": args.moving}
        if args.fixed_mask:
            inputs["fixed_mask"] = args.fixed_mask
        if args.moving_mask:
            inputs["moving_mask"] = args.moving_mask
        controller.save(result, fixed, moving, Path(args.out_dir), fixed_mask, inputs)
        return result.exit_code

    def cmd_evaluate(self, args: argparse.Namespace) -> int:
        has_landmarks = bool(args.landmarks_fixed or args.landmarks_moving)
        if has_landmarks and not (args.landmarks_fixed and args.landmarks_moving):
            raise ConfigurationError("--landmarks-fixed and --landmarks-moving go together")
        if not has_landmarks and not args.labels_fixed:
            raise ConfigurationError("Nothing to evaluate: give landmarks and/or label files")

        controller = EvaluationController.from_path(args.transform)
        if has_landmarks:
            controller.evaluate_landmarks(args.landmarks_fixed, args.landmarks_moving)
        if args.labels_fixed or args.labels_moving:
            controller.evaluate_labels(args.labels_fixed, args.labels_moving)
        reference = args.reference or (args.labels_fixed[0] if args.labels_fixed else None)
        if reference:
            controller.evaluate_jacobian(reference)
        for table in controller.tables():
            print(table)
        if args.out_dir:
            controller.write(Path(args.out_dir) / "metrics.jsonl")
        return EXIT_OK

    def cmd_phantom(self, args: argparse.Namespace) -> int:
        parameters = read_parameters(args.params) if args.params else ParameterMap()
        for flag, key in PHANTOM_FLAGS.items():
            value = getattr(args, flag)
            if value is not None:
                parameters.set(key, [repr(value)])
        controller = PhantomController(PhantomSettings.from_parameter_map(parameters))
        controller.save(controller.generate(), Path(args.out_dir))
        return EXIT_OK

    def cmd_features(self, args: argparse.Namespace) -> int:
        config = load_config(args.params, collect_overrides(args))
        controller = FeatureController(config)
        if args.validate:
            if not (args.fixed and args.moving):
                raise ConfigurationError("--validate needs --fixed and --moving images")
            rows = controller.validate(read_volume(args.fixed), read_volume(args.moving))
            print(format_table(rows, ["layer", "channels", "weight", "fixed", "moving"]))
            if args.out_dir:
                report = ReportWriter(Path(args.out_dir) / "validation.jsonl")
                for row in rows:
                    report.add("layer", **row)
                report.flush()
            return EXIT_OK

        if not (args.image and args.out_dir):
            raise ConfigurationError("features needs an image and --out-dir (or --validate)")
        image = read_volume(args.image)
        mask = read_mask(args.mask, image) if args.mask else None
        maps = controller.compute(image, mask)
        for path in controller.save(maps, Path(args.out_dir), args.prefix):
            logging.info(f"Feature header: {path}")
        return EXIT_OK

    def cmd_ablate(self, args: argparse.Namespace) -> int:
        config = load_config(args.params, collect_overrides(args))
        grid = parse_grid(args.grid)
        fixed = read_volume(args.fixed)
        moving = read_volume(args.moving)
        fixed_mask = read_mask(args.fixed_mask, fixed) if args.fixed_mask else None
        moving_mask = read_mask(args.moving_mask, moving) if args.moving_mask else None
        fixed_points = read_landmarks(args.landmarks_fixed)
        moving_points = read_landmarks(args.landmarks_moving)

        controller = AblationController(config, grid, args.seeds)
        rows = controller.run(fixed, moving, fixed_points, moving_points, fixed_mask, moving_mask)
        controller.save(rows, Path(args.out_dir))
        print(format_table(rows, controller.columns()))
        return EXIT_OK
