"""
Interfaz de línea de comandos y pipeline de extremo a extremo
Etapas: generate | load, synth, train, simulate, verify
"""
import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from ..config import configure_logging, load_settings
from ..exceptions import BoostControlError, BundleError, SynthesisFailedError
from ..models.rnn_model import ConstraintSets, Equilibrium, RnnModel
from ..models.stable_operator import OperatorRunner, StableOperator
from ..models.trajectory import Trajectory
from ..services.benchmark import BenchmarkSpec, generate_benchmark
from ..services.certificates import (
    build_certificate,
    check_constraints_along,
    check_lp_bound,
    check_p_form,
    check_rpi_montecarlo,
    parse_p,
)
from ..services.data_loader import BundleLoader
from ..services.imc_boost import ZeroOperator, project_box, project_box_qp, simulate_closed_loop
from ..services.lmi_synthesis import SynthesisOptions, SynthesisResult, synthesize
from ..services.trainer import LossSpec, OptimizerConfig, sample_scenarios, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SYNTH = 2
EXIT_TRAIN = 3
EXIT_SIMULATE = 4
EXIT_VERIFY = 5

Stage = Literal["generate", "load", "synth", "train", "simulate", "verify"]
STAGE_ORDER = ("generate", "load", "synth", "train", "simulate", "verify")
STAGE_SEEDS = ("generate", "train", "simulate", "verify")


class GenerateStage(BaseModel):
    """Generación de benchmark"""
    preset: Optional[Literal["ph-like"]] = Field(None, description="Preajuste con nombre")
    benchmark: BenchmarkSpec = Field(default_factory=BenchmarkSpec)


class LoadStage(BaseModel):
    """Carga de un modelo existente (directorio de bundle)"""
    bundle_dir: str


class TrainStage(BaseModel):
    """Entrenamiento del operador"""
    scenarios: int = Field(20, ge=1)
    horizon: int = Field(100, ge=1)
    t_cut: Optional[int] = Field(None, ge=0)
    n_xi: int = Field(16, ge=1)
    rho: float = Field(0.95, gt=0.0, lt=1.0)
    output_scale: float = Field(0.01, ge=0.0)
    loss: Literal["ph", "quadratic"] = "ph"
    u_M: Optional[float] = Field(None, gt=0.0, description="None: semiancho de la caja de refuerzo")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class SimulateStage(BaseModel):
    """Simulación de lazo cerrado"""
    scenarios: int = Field(1, ge=1)
    horizon: int = Field(200, ge=0)
    t_cut: Optional[int] = Field(None, ge=0)


class VerifyStage(BaseModel):
    """Verificación de certificados"""
    samples: int = Field(10_000, ge=1)
    p: List[Union[float, str]] = Field(default_factory=lambda: [2, "inf"])
    qp_points: int = Field(1000, ge=1)


class PipelineConfig(BaseModel):
    """Configuración del pipeline"""
    seed: int = Field(0, ge=0)
    output_dir: str = "out"
    stages: List[Stage] = Field(default_factory=lambda: ["generate", "synth", "train", "simulate", "verify"])
    generate: GenerateStage = Field(default_factory=GenerateStage)
    load: Optional[LoadStage] = None
    synth: SynthesisOptions = Field(default_factory=SynthesisOptions)
    train: TrainStage = Field(default_factory=TrainStage)
    simulate: SimulateStage = Field(default_factory=SimulateStage)
    verify: VerifyStage = Field(default_factory=VerifyStage)

    @model_validator(mode="after")
    def _check_stages(self) -> "PipelineConfig":
        if "generate" in self.stages and "load" in self.stages:
            raise ValueError("Las etapas generate y load son excluyentes")
        if "load" in self.stages and self.load is None:
            raise ValueError("La etapa load requiere la sección load")
        for name in self.verify.p:
            parse_p(name)
        return self

    def ordered_stages(self) -> List[str]:
        return [s for s in STAGE_ORDER if s in self.stages]


def load_config(path: Optional[Union[str, Path]]) -> PipelineConfig:
    """Lee un PipelineConfig desde JSON (None: valores por defecto)"""
    if path is None:
        return PipelineConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return PipelineConfig.model_validate(json.load(fh))


def stage_seeds(seed: int) -> Dict[str, int]:
    """Una semilla por etapa derivada de la semilla raíz"""
    children = np.random.SeedSequence(seed).spawn(len(STAGE_SEEDS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STAGE_SEEDS, children)}


def json_safe(value):
    """Reemplaza ±inf/NaN por None y convierte tipos de numpy"""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


@dataclass
class PipelineState:
    """Artefactos en memoria entre etapas"""
    model: Optional[RnnModel] = None
    equilibrium: Optional[Equilibrium] = None
    constraints: Optional[ConstraintSets] = None
    result: Optional[SynthesisResult] = None
    operator: Optional[StableOperator] = None
    trajectories: Optional[List[Trajectory]] = None


class Pipeline:
    """Ejecuta las etapas en orden escribiendo los artefactos en output_dir"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.bundle = BundleLoader(config.output_dir)
        self.seeds = stage_seeds(config.seed)
        self.state = PipelineState()

    # Carga perezosa desde el bundle para etapas sueltas
    def _require_model(self) -> None:
        if self.state.model is None:
            self.state.model, self.state.equilibrium, self.state.constraints = self.bundle.load_model()

    def _require_result(self) -> None:
        self._require_model()
        if self.state.result is None:
            self.state.result = self.bundle.load_synthesis()

    def _optional_operator(self) -> Optional[StableOperator]:
        if self.state.operator is None and self.bundle.has("operator.json"):
            self.state.operator = self.bundle.load_operator()
        return self.state.operator

    def stage_generate(self) -> None:
        spec = self.config.generate.benchmark
        # Sin semilla explícita se usa la derivada de la semilla raíz
        seed = spec.seed if "seed" in spec.model_fields_set else self.seeds["generate"]
        if self.config.generate.preset == "ph-like":
            spec = BenchmarkSpec.ph_like(seed=seed)
        else:
            spec = spec.model_copy(update={'seed': seed})

        model, equilibrium, constraints = generate_benchmark(spec)
        self.state.model, self.state.equilibrium, self.state.constraints = model, equilibrium, constraints
        self.bundle.save_model(model, equilibrium, constraints)

        if spec.u_M is not None and self.config.synth.boost_bound is None:
            self.config = self.config.model_copy(update={
                'synth': self.config.synth.model_copy(update={'boost_bound': [spec.u_M] * spec.m})
            })

    def stage_load(self) -> None:
        source = BundleLoader(self.config.load.bundle_dir)
        model, equilibrium, constraints = source.load_model()
        self.state.model, self.state.equilibrium, self.state.constraints = model, equilibrium, constraints
        self.bundle.save_model(model, equilibrium, constraints)

    def stage_synth(self) -> None:
        self._require_model()
        try:
            self.state.result = synthesize(
                self.state.model, self.state.equilibrium, self.state.constraints, self.config.synth
            )
        except SynthesisFailedError as exc:
            report = exc.report.to_dict() if exc.report is not None else {}
            self.bundle.save_report(json_safe({'error': str(exc), 'report': report}),
                                    "synthesis_failure.json")
            raise
        except BoostControlError as exc:
            self.bundle.save_report({'error': str(exc)}, "synthesis_failure.json")
            raise
        self.bundle.save_synthesis(self.state.result)

    def stage_train(self) -> None:
        self._require_result()
        cfg = self.config.train
        model, equilibrium, result = self.state.model, self.state.equilibrium, self.state.result

        batch = sample_scenarios(self.state.constraints, result, cfg.scenarios, cfg.horizon,
                                 seed=self.seeds["train"], t_cut=cfg.t_cut)
        u_M = cfg.u_M if cfg.u_M is not None else float(result.boost_box.half_widths.min())
        loss = (LossSpec.ph(equilibrium.y_bar, u_M=u_M) if cfg.loss == "ph"
                else LossSpec.quadratic(equilibrium.y_bar, u_M=u_M))

        operator = StableOperator(model.n, model.m, n_xi=cfg.n_xi, rho=cfg.rho,
                                  seed=self.seeds["train"], output_scale=cfg.output_scale)
        training = train(model, equilibrium, result, operator, loss, batch, cfg.optimizer)
        self.state.operator = training.operator
        self.bundle.save_operator(training.operator, epoch=training.best_epoch,
                                  seed=self.seeds["train"], history=training.to_dict())

    def stage_simulate(self) -> None:
        self._require_result()
        cfg = self.config.simulate
        model, equilibrium, result = self.state.model, self.state.equilibrium, self.state.result
        operator = self._optional_operator()

        batch = sample_scenarios(self.state.constraints, result, cfg.scenarios, cfg.horizon,
                                 seed=self.seeds["simulate"], t_cut=cfg.t_cut)
        trajectories = []
        for s in range(cfg.scenarios):
            runner = OperatorRunner(operator) if operator is not None else ZeroOperator(model.m)
            trajectory = simulate_closed_loop(
                model, equilibrium, result, equilibrium.x_bar + batch.dx0[s], batch.w[s], runner
            )
            trajectories.append(trajectory)
            self.bundle.save_trajectory(trajectory, s)
        self.state.trajectories = trajectories

    def stage_verify(self) -> bool:
        self._require_result()
        cfg = self.config.verify
        model, equilibrium, result = self.state.model, self.state.equilibrium, self.state.result
        constraints = self.state.constraints
        seed = self.seeds["verify"]

        trajectories = self.state.trajectories
        if trajectories is None:
            trajectories = self.bundle.load_trajectories()

        checks = [
            check_rpi_montecarlo(model, result, equilibrium, constraints, cfg.samples, seed),
            check_p_form(model, result, equilibrium, constraints),
            self._projection_check(result, cfg.qp_points, seed),
        ]
        for index, trajectory in enumerate(trajectories):
            report = check_constraints_along(trajectory, constraints)
            report['trajectory'] = index
            checks.append(report)
            for p in cfg.p:
                certificate = build_certificate(result, p)
                report = check_lp_bound(trajectory, certificate, equilibrium)
                report['trajectory'] = index
                checks.append(report)

        passed = all(c['pass'] for c in checks)
        self.bundle.save_report(json_safe({'pass': passed, 'checks': checks}))
        logger.info("Verificación: %s", "aprobada" if passed else "fallida")
        return passed

    @staticmethod
    def _projection_check(result: SynthesisResult, points: int, seed: int) -> dict:
        """Proyección cerrada contra el oráculo de mínimos cuadrados acotados"""
        rng = np.random.default_rng(seed)
        box = result.boost_box
        samples = rng.uniform(-3.0, 3.0, size=(points, box.m)) * box.half_widths
        worst = max(float(np.abs(project_box(u, box) - project_box_qp(u, box)).max()) for u in samples)
        return {'condition': 'projection', 'pass': worst <= 1e-10, 'worst_violation': worst,
                'samples': points, 'seed': seed}

    def run(self) -> int:
        """Ejecuta las etapas; devuelve el código de salida"""
        codes = {"generate": EXIT_CONFIG, "load": EXIT_CONFIG, "synth": EXIT_SYNTH,
                 "train": EXIT_TRAIN, "simulate": EXIT_SIMULATE, "verify": EXIT_VERIFY}

        for stage in self.config.ordered_stages():
            logger.info("Etapa %s", stage)
            try:
                outcome = getattr(self, f"stage_{stage}")()
            except BundleError as exc:
                logger.error("Bundle inválido en la etapa %s: %s", stage, exc)
                return EXIT_CONFIG
            except (BoostControlError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                logger.error("Etapa %s fallida: %s", stage, exc)
                return codes[stage]
            if stage == "verify" and not outcome:
                return EXIT_VERIFY

        return EXIT_OK


def run_pipeline(config_path: Optional[Union[str, Path]] = None,
                 config: Optional[PipelineConfig] = None) -> int:
    """
    Ejecuta el pipeline desde un archivo JSON o un PipelineConfig

    Returns:
        Código de salida (0 si todas las verificaciones pasan)
    """
    try:
        config = config or load_config(config_path)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        logger.error("Configuración inválida: %s", exc)
        return EXIT_CONFIG

    return Pipeline(config).run()


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace,
                     stages: Optional[Sequence[str]] = None) -> PipelineConfig:
    update: dict = {}
    if args.out is not None:
        update['output_dir'] = args.out
    if args.seed is not None:
        update['seed'] = args.seed
    if stages is not None:
        update['stages'] = list(stages)
    if getattr(args, "horizon", None) is not None:
        update['simulate'] = config.simulate.model_copy(update={'horizon': args.horizon})
        update['train'] = config.train.model_copy(update={'horizon': args.horizon})
    if getattr(args, "scenarios", None) is not None:
        update.setdefault('simulate', config.simulate)
        update['simulate'] = update['simulate'].model_copy(update={'scenarios': args.scenarios})
        update.setdefault('train', config.train)
        update['train'] = update['train'].model_copy(update={'scenarios': args.scenarios})
    if getattr(args, "p", None) is not None:
        update['verify'] = config.verify.model_copy(update={'p': [args.p]})
    if getattr(args, "preset", None) is not None:
        update['generate'] = config.generate.model_copy(update={'preset': args.preset})

    # Revalida el resultado combinado
    return PipelineConfig.model_validate({**config.model_dump(), **{
        k: (v.model_dump() if isinstance(v, BaseModel) else v) for k, v in update.items()
    }})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boostctl",
        description="Síntesis LMI y refuerzo de desempeño para plantas RNN",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Configuración JSON del pipeline")
    common.add_argument("--out", help="Directorio de salida")
    common.add_argument("--seed", type=int, help="Semilla raíz")
    common.add_argument("--horizon", type=int, help="Horizonte T")
    common.add_argument("--scenarios", type=int, help="Número de escenarios S")
    common.add_argument("--p", choices=["1", "2", "inf"], help="Índice de la norma ℓp")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "simulate", "verify", "run"):
        sub.add_parser(name, parents=[common])

    bench = sub.add_parser("bench")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    gen = bench_sub.add_parser("gen", parents=[common])
    gen.add_argument("--preset", choices=["ph-like"], help="Preajuste del benchmark")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Punto de entrada de la línea de comandos"""
    settings = load_settings()
    configure_logging(settings.log_level)

    args = build_parser().parse_args(argv)
    if args.out is None:
        args.out = str(settings.output_dir) if args.config is None else None
    if args.seed is None and args.config is None:
        args.seed = settings.default_seed

    try:
        config = load_config(args.config)
        if args.command == "bench":
            config = _apply_overrides(config, args, stages=["generate"])
        elif args.command == "run":
            config = _apply_overrides(config, args)
        else:
            # Etapa suelta: el modelo se toma del bundle salvo que se pida load
            source = ["load"] if "load" in config.stages else []
            config = _apply_overrides(config, args, stages=source + [args.command])
        if args.config is None:
            config = config.model_copy(update={
                'synth': config.synth.model_copy(update={
                    'solver': settings.sdp_solver,
                    'psd_tolerance': settings.psd_tolerance,
                })
            })
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        logger.error("Configuración inválida: %s", exc)
        return EXIT_CONFIG

    return run_pipeline(config=config)


if __name__ == "__main__":
    sys.exit(main())
