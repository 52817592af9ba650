"""
Main experiment runner for the python_pat library.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .acoustics import (AcousticOperator, estimate_lipschitz, make_geometry, make_subsampling_mask,
                        operator_for)
from .bench import (CONVERGENCE_FIELDS, METHODS, PERTURBATIONS, ROBUSTNESS_FIELDS, TIMING_FIELDS,
                    MethodSuite, convergence_experiment, evaluate_methods, robustness_experiment,
                    timing_experiment)
from .config import ExperimentConfig, config_hash
from .dgd import DgdModel, run_training_cycle, transfer_update
from .exceptions import PatDataError
from .grids import SeededRng
from .metrics import EVAL_FIELDS, report_rows
from .models import AcousticGeometry, DatasetSample, EvalReport, PhantomSpec, ScalarField
from .phantoms import add_noise_snr, build_dataset
from .storage import (load_geometry, load_model, load_sample, record_manifest, save_geometry,
                      save_model, save_sample, write_csv, write_pgm, write_raw)
from .unet import UnetWeights, train_unet, transfer_update_unet
from .utils import ArtifactLayout
from .variational import select_tv_lambda, tv_reconstruct

logger = logging.getLogger(__name__)

TRANSFER_FIELDS = ['method', 'phase', 'mean_err', 'mean_psnr', 'mean_ssim']


class ExperimentRunner:
    """
    Drives every experiment step against one output directory.

    This runner provides methods to:
    - Generate training and test data for the configured geometry
    - Train the DGD and U-Net models
    - Reconstruct single samples with any method
    - Evaluate all methods and run the benchmark experiments
    - Fine-tune both networks on a shifted domain
    """

    def __init__(self, config: Optional[ExperimentConfig] = None,
                 out_dir: Optional[Union[str, Path]] = None):
        """
        Initialize the runner.

        Args:
            config: Experiment configuration (defaults if None)
            out_dir: Output directory (uses current directory if None)
        """
        self.config = config or ExperimentConfig()
        self.layout = ArtifactLayout(out_dir)
        self.config_hash = config_hash(self.config)
        self._geometry: Optional[AcousticGeometry] = None
        self._lipschitz: Dict[str, float] = {}

    @property
    def threads(self) -> int:
        return self.config.run.threads

    @property
    def seeds(self) -> Dict[str, int]:
        return {
            'data_seed': self.config.data.data_seed,
            'test_seed': self.config.data.test_seed,
            'transfer_seed': self.config.data.transfer_seed,
            'mask_seed': self.config.geometry.mask_seed,
            'dgd_seed': self.config.dgd.seed,
            'unet_seed': self.config.unet.seed,
        }

    @property
    def geometry(self) -> AcousticGeometry:
        """Sub-sampled measurement geometry built from the configuration."""
        if self._geometry is None:
            g = self.config.geometry
            full = make_geometry(g.dims, g.dx, g.sound_speed, g.n_t, g.dt, g.sensor_pitch, g.padding)
            mask = make_subsampling_mask(full, g.subsample_factor, SeededRng(g.mask_seed))
            self._geometry = full.with_mask(mask)
        return self._geometry

    @property
    def operator(self) -> AcousticOperator:
        return operator_for(self.geometry)

    def lipschitz(self, geometry: Optional[AcousticGeometry] = None) -> float:
        geometry = geometry or self.geometry
        key = geometry.signature()
        if key not in self._lipschitz:
            self._lipschitz[key] = estimate_lipschitz(
                geometry, self.config.tv.lipschitz_iters, SeededRng(self.config.geometry.mask_seed + 17))
        return self._lipschitz[key]

    def _metadata(self) -> Dict[str, str]:
        return {'config_hash': self.config_hash}

    def _manifest(self, command: str, outputs: Sequence[Path]) -> None:
        record_manifest(self.layout.manifest_file, command, self.config_hash, self.seeds,
                        [self.layout.relative(p) for p in outputs])

    def _phantom_spec(self, seed: int) -> PhantomSpec:
        return getattr(PhantomSpec, self.config.data.phantom)(seed)

    # data

    def generate_data(self) -> List[Path]:
        """Simulate the training and test sets and write them with the geometry."""
        d = self.config.data
        outputs = [save_geometry(self.layout.geometry_file, self.geometry)]
        for split, n, seed in (('train', d.n_train, d.data_seed), ('test', d.n_test, d.test_seed)):
            samples = build_dataset(n, self._phantom_spec(seed), self.geometry, d.snr, SeededRng(seed),
                                    background=d.background, background_sigma=d.background_sigma,
                                    operator=self.operator, threads=self.threads)
            for sample in samples:
                outputs.extend(save_sample(self.layout.sample_directory(split, sample.index), sample))
            logger.info("wrote %d %s samples", n, split)
        self._manifest('generate-data', outputs)
        return outputs

    def _check_geometry(self) -> None:
        if not self.layout.geometry_file.exists():
            raise PatDataError(f"no dataset in {self.layout.base_directory}; run generate-data first")
        stored = load_geometry(self.layout.geometry_file)
        if stored.signature() != self.geometry.signature():
            raise PatDataError("stored dataset geometry differs from the configured geometry; "
                               "regenerate the data or use the original configuration")

    def load_split(self, split: str) -> List[DatasetSample]:
        self._check_geometry()
        directories = self.layout.list_samples(split)
        if not directories:
            raise PatDataError(f"no {split} samples found; run generate-data first")
        return [load_sample(path, self.geometry, int(path.name.split('_')[-1])) for path in directories]

    # training

    def train_dgd(self) -> DgdModel:
        samples = self.load_split('train')
        model = run_training_cycle(samples, self.geometry, self.config.dgd,
                                   cache_dir=self.layout.gradient_cache, operator=self.operator,
                                   threads=self.threads)
        outputs = save_model(self.layout.model_directory('dgd'), model, model.metadata['loss_curves'], 'step',
                             self._metadata())
        self._manifest('train-dgd', outputs)
        return model

    def train_unet(self) -> UnetWeights:
        samples = self.load_split('train')
        x0 = np.stack([s.x0.data for s in samples])
        x_true = np.stack([s.x_true.data for s in samples])
        weights, curve = train_unet(x0, x_true, self.config.unet)
        outputs = save_model(self.layout.model_directory('unet'), weights, [curve], 'epoch', self._metadata())
        self._manifest('train-unet', outputs)
        return weights

    def load_dgd(self, name: str = 'dgd') -> Optional[DgdModel]:
        directory = self.layout.model_directory(name)
        return load_model(directory) if (directory / 'weights.bin').exists() else None

    def load_unet(self, name: str = 'unet') -> Optional[UnetWeights]:
        directory = self.layout.model_directory(name)
        return load_model(directory) if (directory / 'weights.bin').exists() else None

    def tv_lambda(self) -> float:
        """Relative TV weight with the best err on the last training sample."""
        validation = self.load_split('train')[-1:]
        best, _ = select_tv_lambda(validation, self.operator, self.lipschitz(), self.config.tv.iterations,
                                   self.config.tv.lambda_grid, self.config.tv.inner_iters)
        return best

    def suite(self, methods: Sequence[str] = METHODS) -> MethodSuite:
        """Method suite with whatever models the requested methods need."""
        tv = self.config.tv
        return MethodSuite(
            geometry=self.geometry,
            operator=self.operator,
            lipschitz=self.lipschitz() if {'tv', 'nnls'} & set(methods) else 1.0,
            tv_lambda=self.tv_lambda() if 'tv' in methods else tv.reference_lambda,
            tv_inner_iters=tv.inner_iters,
            iterations=tv.iterations,
            dgd_model=self.load_dgd() if 'dgd' in methods else None,
            unet_weights=self.load_unet() if 'unet' in methods else None,
        )

    # reconstruction and evaluation

    def reconstruct(self, method: str, input_dir: Union[str, Path]) -> List[Path]:
        """Reconstruct one stored sample and write every iterate as PGM and raw array."""
        self._check_geometry()
        input_dir = Path(input_dir)
        sample = load_sample(input_dir, self.geometry)
        suite = self.suite([method])
        _, snapshots, _ = suite.reconstruct(method, sample.y)
        directory = self.layout.recon_directory(method, input_dir.name)
        display_max = float(sample.x_true.data.max())
        outputs = []
        for k, x in enumerate(snapshots):
            outputs.append(write_pgm(directory / f"x_{k}.pgm", x.data, display_max))
            outputs.extend(write_raw(directory / f"x_{k}", x.data))
        self._manifest(f"reconstruct --method {method}", outputs)
        return outputs

    def evaluate(self, methods: Sequence[str] = METHODS) -> List[EvalReport]:
        samples = self.load_split('test')
        reports = evaluate_methods(samples, self.suite(methods), methods, self.threads)
        path = write_csv(self.layout.report_file('eval'), report_rows(reports), EVAL_FIELDS, self._metadata())
        self._manifest('evaluate', [path])
        return reports

    def bench(self) -> List[Path]:
        """Convergence, timing and robustness experiments on the test set."""
        samples = self.load_split('test')
        suite = self.suite()
        b = self.config.bench
        convergence = convergence_experiment(samples, suite, b.iteration_points, threads=self.threads)
        timing = timing_experiment(samples, suite, b.timing_runs, b.timing_iterations)
        robustness = []
        for perturbation in PERTURBATIONS:
            robustness.extend(robustness_experiment(perturbation, samples, suite, self.config,
                                                    threads=self.threads))
        outputs = [
            write_csv(self.layout.bench_file('convergence'), convergence, CONVERGENCE_FIELDS, self._metadata()),
            write_csv(self.layout.bench_file('timing'), timing, TIMING_FIELDS, self._metadata()),
            write_csv(self.layout.bench_file('robustness'), robustness, ROBUSTNESS_FIELDS, self._metadata()),
        ]
        self._manifest('bench', outputs)
        return outputs

    # transfer

    def transfer_domain(self, n: int, seed: int) -> List[Tuple[DatasetSample, ScalarField]]:
        """
        Background-augmented samples measured with the sub-sampled geometry, each
        paired with a weakly regularised TV reference from fully sampled data.
        """
        d = self.config.data
        tv = self.config.tv
        full = self.geometry.full_sampling()
        full_operator = AcousticOperator(full)
        samples = build_dataset(n, self._phantom_spec(seed), self.geometry, d.snr, SeededRng(seed),
                                background=True, background_sigma=d.background_sigma,
                                operator=self.operator, threads=self.threads)
        noise = SeededRng(seed + 100003)
        pairs = []
        for sample in samples:
            y_full = add_noise_snr(full_operator.forward(sample.x_back), d.snr, noise.spawn(sample.index))
            reference, _ = tv_reconstruct(y_full, full_operator, self.lipschitz(full), tv.reference_lambda,
                                          tv.iterations, tv.inner_iters, record_objective=False)
            pairs.append((sample, reference))
        return pairs

    def _transfer_rows(self, label: str, phase: str, reports: Sequence[EvalReport]) -> List[Dict]:
        return [{'method': label, 'phase': phase, 'mean_err': f"{r.mean_err:.10g}",
                 'mean_psnr': f"{r.mean_psnr:.10g}", 'mean_ssim': f"{r.mean_ssim:.10g}"} for r in reports]

    def transfer(self) -> Dict[str, float]:
        """
        Update both networks on the shifted domain and compare before/after on
        held-out shifted samples. Every method is scored against the TV reference
        reconstructed from fully sampled data, the same target the update trains on.
        """
        d = self.config.data
        dgd_model = self.load_dgd()
        unet_weights = self.load_unet()
        if dgd_model is None or unet_weights is None:
            raise PatDataError("transfer needs trained DGD and U-Net models; run train-dgd and train-unet")
        train_pairs = self.transfer_domain(d.n_transfer, d.transfer_seed)
        held_out = self.transfer_domain(d.n_test, d.transfer_seed + 50000)
        outputs = []
        for sample, reference in train_pairs:
            directory = self.layout.sample_directory('transfer', sample.index)
            outputs.extend(save_sample(directory, sample))
            outputs.extend(write_raw(directory / 'x_ref', reference.data))

        new_dgd = transfer_update(dgd_model, [(s.y, ref) for s, ref in train_pairs], self.geometry,
                                  self.config.dgd.transfer_lr, self.config.dgd.transfer_epochs,
                                  self.config.dgd, operator=self.operator, threads=self.threads)
        new_unet = transfer_update_unet(unet_weights, [(s.x0, ref) for s, ref in train_pairs],
                                        self.config.unet.transfer_lr, self.config.unet.transfer_epochs,
                                        self.config.unet)
        outputs += save_model(self.layout.model_directory('dgd_transfer'), new_dgd, [], 'step', self._metadata())
        outputs += save_model(self.layout.model_directory('unet_transfer'), new_unet, [], 'epoch',
                              self._metadata())

        evaluation = [DatasetSample(reference, s.y, s.x0, s.index, s.x_back) for s, reference in held_out]
        rows = []
        summary = {}
        for label, before, after in (('dgd', dgd_model, new_dgd), ('unet', unet_weights, new_unet)):
            for phase, model in (('before', before), ('after', after)):
                suite = MethodSuite(self.geometry, self.operator, 1.0, self.config.tv.reference_lambda,
                                    dgd_model=model if label == 'dgd' else None,
                                    unet_weights=model if label == 'unet' else None)
                reports = evaluate_methods(evaluation, suite, [label], self.threads)
                rows += self._transfer_rows(label, phase, reports)
                summary[f"{label}_{phase}"] = reports[0].mean_err
        outputs.append(write_csv(self.layout.report_file('transfer'), rows, TRANSFER_FIELDS, self._metadata()))
        self._manifest('transfer', outputs)
        return summary

