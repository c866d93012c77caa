import math
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..vehicle import (
    DATASET_COLUMNS, DEFAULT_VEHICLE, ENV_A, ENV_B, ENV_C, ControlInput, DatasetConfig, EnvInput, PathConfig,
    VehicleState, bicycle_update, env_grid, excitation_controls, generate_dataset, get_scenario,
    lateral_deviation, read_dataset_csv, reference_state, scenario_env, step_bicycle, switch_times,
    write_dataset_csv,
)


# ---------------------------------------------------------------------------
# Bicycle step
# ---------------------------------------------------------------------------

class StepBicycleTest(SimpleTestCase):
    def test_straight_line_step(self):
        """Прямолинейное движение: (0,0,0,1) за 0.1 с переходит в (0.1,0,0,1)"""
        x = step_bicycle(VehicleState(0, 0, 0, 1), ControlInput(0, 0), EnvInput(0.9, 0), 0.1)
        np.testing.assert_allclose(x.as_array(), [0.1, 0.0, 0.0, 1.0], atol=1e-15)

    def test_wind_pushes_laterally(self):
        """Боковой ветер смещает автомобиль на dt · k_w · w"""
        x = step_bicycle(VehicleState(0, 0, 0, 1), ControlInput(0, 0), EnvInput(0.9, 4.0), 0.1)
        self.assertAlmostEqual(x.py, 0.1 * DEFAULT_VEHICLE.wind_coupling * 4.0, places=15)

    def test_low_grip_reduces_steering(self):
        """При mu < mu_ref эффективный угол руля уменьшается пропорционально сцеплению"""
        u = ControlInput(0.2, 0.0)
        x0 = VehicleState(0, 0, 0, 5)
        full = step_bicycle(x0, u, EnvInput(0.9, 0), 0.1)
        half = step_bicycle(x0, u, EnvInput(0.45, 0), 0.1)
        expected = 0.1 * 5 / DEFAULT_VEHICLE.wheelbase * math.tan(0.1)
        self.assertAlmostEqual(half.psi, expected, places=12)
        self.assertGreater(full.psi, half.psi)

    def test_acceleration_limited_by_traction(self):
        """Продольное ускорение ограничено кругом трения: |a| ≤ mu·g"""
        x = step_bicycle(VehicleState(0, 0, 0, 1), ControlInput(0, 3.0), EnvInput(0.3, 0), 0.1)
        self.assertAlmostEqual(x.v, 1.0 + 0.1 * 0.3 * DEFAULT_VEHICLE.gravity, places=12)

    def test_speed_never_negative(self):
        """Скорость не становится отрицательной при торможении"""
        x = step_bicycle(VehicleState(0, 0, 0, 0.1), ControlInput(0, -3.0), EnvInput(0.9, 0), 0.1)
        self.assertEqual(x.v, 0.0)

    def test_heading_is_wrapped(self):
        """Курс после шага лежит в (-pi, pi]"""
        x = step_bicycle(VehicleState(0, 0, math.pi - 1e-3, 10), ControlInput(0.5, 0), ENV_A, 0.1)
        self.assertLessEqual(x.psi, math.pi)
        self.assertGreater(x.psi, -math.pi)
        self.assertLess(x.psi, 0.0)

    def test_control_out_of_limits_rejected(self):
        """Управление вне ограничений отклоняется с кодом out_of_range"""
        with self.assertRaises(ValidationError) as ctx:
            step_bicycle(VehicleState(0, 0, 0, 1), ControlInput(0.6, 0), ENV_A, 0.1)
        self.assertEqual(ctx.exception.code, 'out_of_range')

    def test_environment_outside_box_rejected(self):
        """Окружение вне области (mu, w) отклоняется"""
        with self.assertRaises(ValidationError) as ctx:
            step_bicycle(VehicleState(0, 0, 0, 1), ControlInput(0, 0), EnvInput(0.2, 0), 0.1)
        self.assertEqual(ctx.exception.code, 'out_of_range')

    def test_non_finite_state_rejected(self):
        """NaN в состоянии отклоняется с кодом non_finite"""
        with self.assertRaises(ValidationError) as ctx:
            step_bicycle(VehicleState(float('nan'), 0, 0, 1), ControlInput(0, 0), ENV_A, 0.1)
        self.assertEqual(ctx.exception.code, 'non_finite')

    def test_array_update_matches_single_steps(self):
        """Векторизованный шаг совпадает с поэлементным"""
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(5, 4)) + [0, 0, 0, 5]
        u = rng.uniform(-1, 1, size=(5, 2)) * DEFAULT_VEHICLE.control_limits
        e = np.tile([0.6, 2.0], (5, 1))
        batch = bicycle_update(x, u, e, 0.1)
        for i in range(5):
            single = step_bicycle(VehicleState.from_array(x[i]), ControlInput.from_array(u[i]),
                                  EnvInput.from_array(e[i]), 0.1)
            np.testing.assert_array_equal(batch[i], single.as_array())

    def test_scalar_oracle(self):
        """x=(0,0,0,5), u=(0.1,1), e=(0.5,4): пошаговый скалярный расчёт до 1e-12"""
        dt, L, g = 0.1, DEFAULT_VEHICLE.wheelbase, DEFAULT_VEHICLE.gravity
        delta_eff = 0.1 * min(1.0, 0.5 / DEFAULT_VEHICLE.mu_ref)
        a_eff = max(-0.5 * g, min(0.5 * g, 1.0))
        expected = [
            dt * 5.0,
            dt * DEFAULT_VEHICLE.wind_coupling * 4.0,
            dt * 5.0 / L * math.tan(delta_eff),
            5.0 + dt * a_eff,
        ]
        x = step_bicycle(VehicleState(0, 0, 0, 5), ControlInput(0.1, 1.0), EnvInput(0.5, 4.0), dt)
        np.testing.assert_allclose(x.as_array(), expected, rtol=0, atol=1e-12)

    def test_zero_speed_does_not_move(self):
        """Нулевая скорость и руль 0.3: состояние не меняется"""
        x = step_bicycle(VehicleState(0, 0, 0, 0), ControlInput(0.3, 0), EnvInput(0.9, 0), 0.1)
        self.assertEqual(list(x.as_array()), [0.0, 0.0, 0.0, 0.0])

    def test_speed_bounded_over_full_episode(self):
        """60 с насыщенных управлений в углах области: v остаётся в [0, v_max]"""
        rng = np.random.default_rng(11)
        limits = DEFAULT_VEHICLE.control_limits
        for mu in (0.3, 0.9):
            for w in (-8.0, 8.0):
                x = VehicleState(0, 0, 0, 5)
                for _ in range(600):
                    u = ControlInput.from_array(rng.choice([-1.0, 1.0], size=2) * limits)
                    x = step_bicycle(x, u, EnvInput(mu, w), 0.1)
                    self.assertGreaterEqual(x.v, 0.0)
                    self.assertLessEqual(x.v, DEFAULT_VEHICLE.v_max)


# ---------------------------------------------------------------------------
# Scenarios and reference path
# ---------------------------------------------------------------------------

class ScenarioTest(SimpleTestCase):
    def test_s3_switches_every_three_seconds(self):
        """S3 на 15 с: среда меняется ровно в t = 3, 6, 9, 12 с"""
        self.assertEqual(switch_times(get_scenario('S3', 15.0)), [3.0, 6.0, 9.0, 12.0])

    def test_s3_cycle_reads_a_b_c_b(self):
        """S3 проходит окружения A, B, C, B и возвращается к A"""
        s = get_scenario('S3')
        envs = [scenario_env(s, t) for t in (0.0, 3.0, 6.0, 9.0, 12.0)]
        self.assertEqual(envs[0], ENV_A)
        self.assertEqual(envs[1], envs[3])
        self.assertEqual(envs[4], ENV_A)
        self.assertLess(envs[2].mu, envs[1].mu)

    def test_s3_schedule_covers_full_cycle(self):
        """На 60 с каждый трёхсекундный блок S3 следует циклу A, B, C, B"""
        s = get_scenario('S3')
        cycle = [ENV_A, ENV_B, ENV_C, ENV_B]
        for k in range(600):
            t = 0.1 * k
            self.assertEqual(scenario_env(s, t), cycle[(k // 30) % 4], msg=f"t={t}")

    def test_time_just_below_period_starts_next_cycle(self):
        """t чуть меньше кратного 12 с уже относится к новому циклу (A)"""
        s = get_scenario('S3')
        self.assertEqual(scenario_env(s, 35.99999999999999), ENV_A)
        self.assertEqual(scenario_env(s, 11.999999999999998), ENV_A)
        self.assertEqual(scenario_env(s, 11.5), ENV_B)

    def test_s2_friction_drop(self):
        """S2: одно переключение, сцепление падает"""
        s = get_scenario('S2')
        self.assertEqual(switch_times(s), [5.0])
        self.assertGreater(scenario_env(s, 4.9).mu, scenario_env(s, 5.0).mu)

    def test_s1_is_constant(self):
        """S1: переключений нет"""
        self.assertEqual(switch_times(get_scenario('S1')), [])

    def test_time_outside_scenario_rejected(self):
        """Время вне [0, duration] отклоняется"""
        with self.assertRaises(ValidationError) as ctx:
            scenario_env(get_scenario('S1'), 61.0)
        self.assertEqual(ctx.exception.code, 'out_of_range')

    def test_unknown_scenario_rejected(self):
        """Неизвестный идентификатор сценария отклоняется"""
        with self.assertRaises(ValidationError) as ctx:
            get_scenario('S4')
        self.assertEqual(ctx.exception.code, 'invalid_choice')

    def test_env_grid_covers_box(self):
        """Сетка 9×9 содержит 81 точку и углы области"""
        grid = env_grid()
        self.assertEqual(grid.shape, (81, 2))
        np.testing.assert_allclose(grid.min(axis=0), [0.3, -8.0])
        np.testing.assert_allclose(grid.max(axis=0), [0.9, 8.0])


class ReferencePathTest(SimpleTestCase):
    def test_straight_path_deviation_is_offset(self):
        """Для прямой отклонение равно |py|"""
        path = PathConfig(kind='straight')
        self.assertAlmostEqual(lateral_deviation(path, 3.0, -0.3), 0.3)

    def test_point_on_sine_path_has_zero_deviation(self):
        """Точка опорной траектории имеет нулевое отклонение"""
        path = PathConfig()
        ref = reference_state(path, 2.5)
        self.assertAlmostEqual(lateral_deviation(path, ref.px, ref.py), 0.0, places=9)

    def test_perpendicular_distance_not_larger_than_vertical(self):
        """Перпендикулярное расстояние не больше вертикального смещения"""
        path = PathConfig(amplitude=2.0, period=8.0)
        ref = reference_state(path, 1.0)
        self.assertLessEqual(lateral_deviation(path, ref.px, ref.py + 0.5), 0.5 + 1e-12)

    def test_negative_time_rejected(self):
        """Отрицательное время опорной траектории отклоняется"""
        with self.assertRaises(ValidationError):
            reference_state(PathConfig(), -0.1)

    def test_straight_lane_reference(self):
        """Прямая полоса, t = 2, скорость 5 → (10, 0, 0, 5)"""
        ref = reference_state(PathConfig(kind='straight', speed=5.0), 2.0)
        self.assertEqual(list(ref.as_array()), [10.0, 0.0, 0.0, 5.0])

    def test_sine_reference_starts_on_axis(self):
        """Синусоида при t = 0: боковое смещение 0"""
        self.assertEqual(reference_state(PathConfig(), 0.0).py, 0.0)

    def test_sine_heading_matches_finite_differences(self):
        """Курс опорной траектории совпадает с касательной по центральным разностям до 1e-6"""
        path = PathConfig(amplitude=1.5, period=7.0)
        h = 1e-5
        for t in (0.3, 1.7, 4.2, 11.9):
            ahead, behind = reference_state(path, t + h), reference_state(path, t - h)
            heading = math.atan2(ahead.py - behind.py, ahead.px - behind.px)
            self.assertAlmostEqual(reference_state(path, t).psi, heading, delta=1e-6)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

class DatasetTest(SimpleTestCase):
    def setUp(self):
        self.cfg = DatasetConfig(segments=4, length=6, scenarios=('S1', 'S3', 'random'))

    def test_tuples_chain_through_the_simulator(self):
        """Каждый следующий x получается шагом симулятора"""
        d = generate_dataset(self.cfg, seed=1)
        x, u, e, x_next = d.tuples()
        np.testing.assert_array_equal(x_next, bicycle_update(x, u, e, d.dt))
        self.assertEqual(len(d), 24)

    def test_same_seed_same_dataset(self):
        """Один seed даёт бит-в-бит одинаковые данные"""
        a = generate_dataset(self.cfg, seed=7)
        b = generate_dataset(self.cfg, seed=7)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.controls, b.controls)

    def test_excitation_controls_within_limits(self):
        """Возбуждающие управления не выходят за ограничения"""
        controls = excitation_controls(np.random.default_rng(0), 500, 0.1, 1.0)
        self.assertTrue(np.all(np.abs(controls) <= DEFAULT_VEHICLE.control_limits))

    def test_csv_reparses_to_same_values(self):
        """CSV набора данных читается обратно без потерь"""
        d = generate_dataset(self.cfg, seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'dataset.csv'
            write_dataset_csv(d, path)
            with path.open() as handle:
                self.assertEqual(handle.readline().strip().split(','), DATASET_COLUMNS)
            back = read_dataset_csv(path)
        np.testing.assert_array_equal(back.states, d.states)
        np.testing.assert_array_equal(back.controls, d.controls)
        np.testing.assert_array_equal(back.envs, d.envs)

    def test_broken_chain_rejected(self):
        """Разрыв сцепки x_next → x отклоняется с кодом broken_chain"""
        d = generate_dataset(DatasetConfig(segments=1, length=3), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'dataset.csv'
            write_dataset_csv(d, path)
            lines = path.read_text().splitlines()
            fields = lines[2].split(',')
            fields[2] = '123.0'
            lines[2] = ','.join(fields)
            path.write_text('\n'.join(lines) + '\n')
            with self.assertRaises(ValidationError) as ctx:
                read_dataset_csv(path)
        self.assertEqual(ctx.exception.code, 'broken_chain')

    def test_unknown_scenario_in_config_rejected(self):
        """Неизвестный сценарий в конфигурации набора отклоняется"""
        with self.assertRaises(ValidationError):
            generate_dataset(DatasetConfig(scenarios=('S9',)), seed=0)

    def test_every_environment_inside_box(self):
        """200 сегментов длины 50: каждое e_k лежит в области (mu, w)"""
        d = generate_dataset(DatasetConfig(segments=200, length=50), seed=0)
        envs = d.envs.reshape(-1, 2)
        self.assertTrue(np.all((envs[:, 0] >= 0.3) & (envs[:, 0] <= 0.9)))
        self.assertTrue(np.all(np.abs(envs[:, 1]) <= 8.0))
