import time
from pathlib import Path

from ...checkpoints import file_sha256, save_checkpoint
from ...forms import ModelConfigForm, TrainConfigForm
from ...training import METHOD_TAGS, train
from ...vehicle import read_dataset_csv
from ..base import SfkdCommand, artifacts_path


class Command(SfkdCommand):
    help = 'Train an SFKD model (or an ablation) on a generated dataset'
    config_forms = (TrainConfigForm, ModelConfigForm)

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', default=None, help='Dataset CSV (default: <artifacts>/dataset.csv)')
        parser.add_argument('--dt', type=float, default=0.1, help='Sampling period of the dataset, s')
        parser.add_argument('--ablation', choices=['full', 'no-fiber', 'no-contr'], default=None)
        parser.add_argument('--epochs', type=int, default=None)
        parser.add_argument('--label', default=None)
        parser.add_argument('--output', default=None, help='Checkpoint file (default: <artifacts>/checkpoints/<label>.pt)')

    def run(self, **options):
        overrides = {'seed': options['seed']}
        if options['ablation']:
            overrides['ablation'] = options['ablation']
        if options['epochs'] is not None:
            overrides['epochs'] = options['epochs']
        train_cfg, model_cfg = self.load_configs(options, overrides)

        dataset_path = Path(options['dataset'] or artifacts_path('dataset.csv'))
        dataset = read_dataset_csv(dataset_path, options['dt'])
        label = options['label'] or f"{train_cfg.ablation}_seed{train_cfg.seed}"
        output = Path(options['output'] or artifacts_path('checkpoints', f'{label}.pt'))
        self.stdout.write(f"Обучение {METHOD_TAGS[train_cfg.ablation]}: {len(dataset)} переходов, "
                          f"{train_cfg.epochs} эпох")

        started = time.perf_counter()
        model, g, log = train(
            dataset, train_cfg, model_cfg,
            checkpoint_dir=output.parent / f'{label}_epochs' if train_cfg.checkpoint_every else None,
        )
        seconds = time.perf_counter() - started
        final = log.final

        # No timings in the file: checkpoints must be bit-identical across runs.
        meta = {
            'label': label,
            'ablation': train_cfg.ablation,
            'seed': train_cfg.seed,
            'dataset_sha256': file_sha256(dataset_path),
            'l_pred': final.l_pred,
            'l_contr': final.l_contr,
            'l_recon': final.l_recon,
        }
        save_checkpoint(output, model, g, meta)
        log_path = log.write_csv(output.with_name(f'{label}_train_log.csv'))

        record = self.checkpoint_record(output, model, meta)
        record.train_seconds = seconds
        record.save(update_fields=['train_seconds'])
        self.stdout.write(f"max ||A(e)||₂ = {final.max_specnorm_A:.6f}, max ||∂r/∂z||₂ = {final.max_jac_norm:.4f}")
        self.success(f"Контрольная точка {label} → {output} (журнал: {log_path})")
