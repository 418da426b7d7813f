"""
Цикл маскированного инпейнтинга.

Изображение проецируется кодеком в x_0^known, область рук заполняется шумом, и на
каждом обратном шаге результат DDIM внутри маски смешивается с заново зашумлённым
известным содержимым снаружи. Последний шаг выполняется без маски, чтобы
согласовать руку с окружением.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
import scipy.ndimage
import torch

from .artifacts import as_image_array
from .control import (AdaptiveStrength, ControlBranch, FixedStrength, PhaseSweepReport,
                      StrengthStrategy, adaptive_strength, check_strength,
                      phase_sweep, scale_control)
from .exceptions import (CodecError, DetectorUnavailableError, EmptyMaskError, MeshReconstructionError,
                         NoHandsFoundError, ShapeMismatchError)
from .hand_prior import (DepthMap, HandLocalizer, KeypointDetector, KeypointRegressor,
                         Keypoints2D, MeshProvider, PinholeCamera, localize_hands, mpjpe, project,
                         regress_keypoints, render_depth)
from .schedule import (Conditioning, Denoiser, GuidanceConfig, NoiseSchedule, Seed, TextEncoder,
                       TimestepPlan, ddim_step, forward_noise, guidance_compose, make_generator)

logger = logging.getLogger(__name__)

DEFAULT_MASK_DILATION = 8


def downsample_mask(pixel_mask: np.ndarray, latent_shape: Sequence[int]) -> np.ndarray:
    """
    Покрывающее уменьшение маски: латентная ячейка равна 1, если пересекает хоть
    один пиксель маски.

    Ячейка j по оси длины N покрывает пиксельный интервал [j·N/n, (j+1)·N/n), поэтому
    правило работает и при некратных размерах.

    :param pixel_mask: Бинарная маска H×W.
    :param latent_shape: (h, w) латентной сетки.
    :return: Бинарная маска h×w.
    """
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    height, width = pixel_mask.shape
    rows = _cover_matrix(int(latent_shape[0]), height)
    cols = _cover_matrix(int(latent_shape[1]), width)
    return (rows @ pixel_mask.astype(np.int64) @ cols.T) > 0


def _cover_matrix(cells: int, pixels: int) -> np.ndarray:
    index = np.arange(pixels)
    lo = (index * cells) // pixels
    hi = -(-((index + 1) * cells) // pixels) - 1
    grid = np.arange(cells)[:, None]
    return ((grid >= lo[None, :]) & (grid <= hi[None, :])).astype(np.int64)


def dilate_mask(mask: np.ndarray, pixels: int) -> np.ndarray:
    """
    Расширяет маску квадратным структурным элементом на ``pixels`` пикселей.
    """
    mask = np.asarray(mask, dtype=bool)
    if pixels <= 0 or not mask.any():
        return mask.copy()
    return scipy.ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool), iterations=pixels)


def _as_mask_tensor(m: Any) -> torch.Tensor:
    if isinstance(m, torch.Tensor):
        return m.to(dtype=torch.bool)
    return torch.from_numpy(np.asarray(m, dtype=bool))


def masked_compose(a: torch.Tensor, b: torch.Tensor, m: Any) -> torch.Tensor:
    """
    m⊙a + (1 − m)⊙b для бинарной маски m (h×w, транслируется по каналам).
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f'Shapes "{tuple(a.shape)}" and "{tuple(b.shape)}" differ')
    mask = _as_mask_tensor(m)
    if mask.shape[-2:] != a.shape[-2:]:
        raise ShapeMismatchError(f'Mask shape "{tuple(mask.shape)}" does not match "{tuple(a.shape)}"')
    return torch.where(mask, a, b)


def init_noise(x_known_T: torch.Tensor, m: Any, seed: Seed) -> torch.Tensor:
    """
    Стартовая сетка: свежий гауссов шум в маске, зашумлённое известное содержимое снаружи.
    """
    noise = torch.randn(x_known_T.shape, generator=make_generator(seed), dtype=x_known_T.dtype)
    return masked_compose(noise, x_known_T, m)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    uint8 ``(H, W, C)`` → ``(C, H, W)`` в [-1, 1].
    """
    array = as_image_array(image)
    return torch.from_numpy(array.astype(np.float64) / 127.5 - 1.0).permute(2, 0, 1).to(dtype)


def tensor_to_image(pixels: torch.Tensor) -> np.ndarray:
    array = ((pixels.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return array.permute(1, 2, 0).numpy().astype(np.uint8)


class Codec(ABC):
    """
    Проекция изображения в пространство, где идёт сэмплирование, и обратно.
    """
    round_trip_tolerance: float = 0.0

    @abstractmethod
    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        """
        :param pixels: Изображение ``(C, H, W)`` в [-1, 1].
        :return: Латентная сетка.
        """

    @abstractmethod
    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """
        :param latent: Латентная сетка.
        :return: Изображение ``(C, H, W)`` в [-1, 1].
        """


class IdentityCodec(Codec):
    """
    Пиксельное пространство: точный круговой проход.
    """

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        return pixels.clone()

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent.clone()


@dataclass
class RegionMask:
    pixel_mask: np.ndarray
    latent_mask: np.ndarray

    @classmethod
    def from_pixels(cls, pixel_mask: np.ndarray, latent_shape: Sequence[int]) -> 'RegionMask':
        pixel_mask = np.asarray(pixel_mask, dtype=bool)
        return cls(pixel_mask, downsample_mask(pixel_mask, latent_shape))


@dataclass(eq=False)
class InpaintCondition:
    masked_image_latent: torch.Tensor
    mask: RegionMask
    depth: DepthMap

    def x_mask(self) -> torch.Tensor:
        m = torch.from_numpy(self.mask.latent_mask.astype(np.float64)).to(self.masked_image_latent.dtype)
        return torch.cat([m[None], self.masked_image_latent], dim=0)

    def control_image(self, dtype: torch.dtype) -> torch.Tensor:
        return torch.from_numpy(self.depth.values).to(dtype)[None]


@dataclass(eq=False)
class InpaintRequest:
    """
    Запрос на исправление.

    Пустой список ``masks`` означает автоматическую локализацию.
    """
    image: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)
    prompt: str = ''
    negative_prompt: str = ''
    extra_negative_prompt: str = 'fake 3D rendered image'
    guidance: float = 7.5
    strategy: StrengthStrategy = field(default_factory=FixedStrength)
    steps: int = 50
    plan: Optional[TimestepPlan] = None
    seed: int = 0
    final_exact_composite: bool = False
    mask_dilation: int = DEFAULT_MASK_DILATION

    def __post_init__(self) -> None:
        self.image = as_image_array(self.image)
        self.masks = [np.asarray(mask, dtype=bool) for mask in self.masks]
        for mask in self.masks:
            if mask.shape != self.image.shape[:2]:
                raise ShapeMismatchError(f'Mask shape "{mask.shape}" differs from image "{self.image.shape[:2]}"')
        if self.guidance < 0:
            raise ValueError(f'Guidance strength "{self.guidance}" must be nonnegative')


@dataclass(eq=False)
class RectifiedResult:
    image: np.ndarray
    strength: Optional[float]
    per_hand_mpjpe: list[Optional[float]] = field(default_factory=list)
    regions: list[np.ndarray] = field(default_factory=list)
    keypoints: list[Keypoints2D] = field(default_factory=list)
    depth: Optional[DepthMap] = None
    metadata: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def mpjpe(self) -> Optional[float]:
        values = [value for value in self.per_hand_mpjpe if value is not None]
        return float(np.mean(values)) if values else None

    def sidecar(self) -> dict:
        return {
            'strength': self.strength,
            'mpjpe': self.mpjpe,
            'per_hand_mpjpe': self.per_hand_mpjpe,
            'keypoints': [keypoints.to_list() for keypoints in self.keypoints],
            'warnings': self.warnings,
            **self.metadata,
        }


@dataclass(eq=False)
class PreparedRequest:
    request: InpaintRequest
    regions: list[np.ndarray]
    keypoints: list[Keypoints2D]
    camera: PinholeCamera
    condition: InpaintCondition
    x0_known: torch.Tensor
    plan: TimestepPlan
    guidance: GuidanceConfig
    negative: Conditioning
    warnings: list[str] = field(default_factory=list)


def texture_variance(image: np.ndarray, mask: np.ndarray) -> float:
    """
    Дисперсия яркости в области руки: грубая мера сохранности текстур (морщин).
    """
    region = as_image_array(image).astype(np.float64).mean(axis=2)[np.asarray(mask, dtype=bool)]
    return float(region.var()) if region.size else 0.0


class CountingDenoiser:
    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser
        self.calls = 0

    def __call__(self, *args, **kwargs) -> torch.Tensor:
        self.calls += 1
        return self.denoiser.predict_noise(*args, **kwargs)


class HandRefiner:
    """
    Оркестратор исправления рук.

    :param denoiser: Замороженный денойзер инпейнтинга.
    :param control_branch: Управляющая ветка по карте глубины.
    :param codec: Кодек изображение ↔ сетка.
    :param text_encoder: Кодировщик промптов.
    :param schedule: Расписание шума.
    :param mesh_provider: Модель реконструкции меша.
    :param localizer: Локализатор рук (если маски не заданы явно).
    :param detector: Детектор ключевых точек для MPJPE и адаптивной силы.
    :param regressor: Регрессор J ключевых точек.
    :param camera: Камера рендеринга; по умолчанию строится по размеру кадра.
    """

    def __init__(self, denoiser: Denoiser, control_branch: ControlBranch, codec: Codec,
                 text_encoder: TextEncoder, schedule: NoiseSchedule,
                 mesh_provider: Optional[MeshProvider] = None, localizer: Optional[HandLocalizer] = None,
                 detector: Optional[KeypointDetector] = None, regressor: Optional[KeypointRegressor] = None,
                 camera: Optional[PinholeCamera] = None, dtype: torch.dtype = torch.float32):
        self.denoiser = denoiser
        self.control_branch = control_branch
        self.codec = codec
        self.text_encoder = text_encoder
        self.schedule = schedule
        self.mesh_provider = mesh_provider
        self.localizer = localizer
        self.detector = detector
        self.regressor = regressor
        self.camera = camera
        self.dtype = dtype

    def _encode(self, pixels: torch.Tensor) -> torch.Tensor:
        try:
            return self.codec.encode(pixels)
        except Exception as exc:
            raise CodecError(f'Codec failed to encode: {exc}') from exc

    def _decode(self, latent: torch.Tensor) -> torch.Tensor:
        try:
            return self.codec.decode(latent)
        except Exception as exc:
            raise CodecError(f'Codec failed to decode: {exc}') from exc

    def prepare(self, request: InpaintRequest, camera: Optional[PinholeCamera] = None) -> Optional[PreparedRequest]:
        """
        Локализация, реконструкция мешей, рендер глубины и проекция в латентное пространство.

        :return: Подготовленный запрос или None, если рук не найдено.
        :raises EmptyMaskError: Если все переданные маски пусты.
        :raises MeshReconstructionError: Если не восстановлен ни один меш.
        """
        image = request.image
        height, width = image.shape[:2]
        overrides = [mask for mask in request.masks if mask.any()]
        if request.masks and not overrides:
            raise EmptyMaskError(f'All {len(request.masks)} supplied hand mask(s) are empty')
        masks = localize_hands(image, self.localizer, overrides)
        if not masks:
            return None
        if self.mesh_provider is None:
            raise MeshReconstructionError('No mesh provider configured')
        warnings = []
        hands = []
        for hand in self.mesh_provider.reconstruct(image, masks):
            if hand.ok and hand.mesh.renderable:
                hands.append(hand)
                continue
            message = f'Hand {hand.region_index} skipped: {hand.error or "mesh is not renderable"}'
            logger.warning(message)
            warnings.append(message)
        if not hands:
            raise MeshReconstructionError('Mesh reconstruction failed for every hand')

        camera = camera or self.camera or hands[0].camera or PinholeCamera.for_image(width, height)
        depth = render_depth([hand.mesh for hand in hands], camera)
        keypoints = []
        if self.regressor is not None:
            keypoints = [project(regress_keypoints(hand.mesh, self.regressor), camera) for hand in hands]
        regions = [masks[hand.region_index] for hand in hands]
        pixel_mask = dilate_mask(np.logical_or.reduce(regions), request.mask_dilation)

        pixels = image_to_tensor(image, self.dtype)
        x0_known = self._encode(pixels)
        masked_pixels = pixels * torch.from_numpy(~pixel_mask).to(self.dtype)[None]
        condition = InpaintCondition(self._encode(masked_pixels),
                                     RegionMask.from_pixels(pixel_mask, x0_known.shape[-2:]), depth)
        plan = request.plan or TimestepPlan.uniform(self.schedule, request.steps)
        plan.check(self.schedule)
        guidance = GuidanceConfig.from_prompts(self.text_encoder, request.guidance, request.prompt,
                                               request.negative_prompt, request.extra_negative_prompt)
        return PreparedRequest(request, regions, keypoints, camera, condition, x0_known, plan,
                               guidance, guidance.negative(self.text_encoder), warnings)

    def _predict(self, counter: CountingDenoiser, x_t: torch.Tensor, t: int, prepared: PreparedRequest,
                 strength: float) -> torch.Tensor:
        condition = prepared.condition
        x_mask = condition.x_mask()
        control_image = condition.control_image(x_t.dtype)

        def branch(conditioning: Conditioning) -> torch.Tensor:
            control = scale_control(self.control_branch.features(control_image, x_t, t, conditioning), strength)
            return counter(x_t, t, conditioning, x_mask=x_mask, control=control)

        eps_pos = branch(prepared.guidance.cond_positive)
        if prepared.guidance.w == 1:
            return eps_pos
        return guidance_compose(eps_pos, branch(prepared.negative), prepared.guidance.w)

    @torch.no_grad()
    def sample(self, prepared: PreparedRequest, strength: float, seed: Seed) -> tuple[torch.Tensor, int]:
        """
        Маскированный DDIM: шаги i = S..2 с композицией по маске и финальный шаг без маски.

        :return: Итоговая сетка и число вызовов денойзера (2·S при w ≠ 1, S при w = 1).
        """
        generator = make_generator(seed)
        counter = CountingDenoiser(self.denoiser)
        m = prepared.condition.mask.latent_mask
        plan = prepared.plan
        x0_known = prepared.x0_known
        x_known = forward_noise(x0_known, plan.taus[-1], self.schedule, generator)
        x = init_noise(x_known, m, generator)
        for t_from, t_to in plan.reverse_pairs():
            eps = self._predict(counter, x, t_from, prepared, strength)
            candidate = ddim_step(x, eps, t_from, t_to, self.schedule)
            x_known = forward_noise(x0_known, t_to, self.schedule, generator)
            x = masked_compose(candidate, x_known, m)
        t_from, t_to = plan.final_pair()
        eps = self._predict(counter, x, t_from, prepared, strength)
        x = ddim_step(x, eps, t_from, t_to, self.schedule)
        return x, counter.calls

    def rectify_with_strength(self, prepared: PreparedRequest, strength: float) -> RectifiedResult:
        check_strength(strength)
        request = prepared.request
        latent, calls = self.sample(prepared, strength, request.seed)
        output = tensor_to_image(self._decode(latent))
        if output.shape != request.image.shape:
            raise CodecError(f'Decoded image shape "{output.shape}" differs from input "{request.image.shape}"')
        if request.final_exact_composite:
            outside = ~prepared.condition.mask.pixel_mask
            output[outside] = request.image[outside]
        result = RectifiedResult(
            image=output, strength=strength, regions=prepared.regions, keypoints=prepared.keypoints,
            depth=prepared.condition.depth, warnings=list(prepared.warnings),
            metadata={'seed': request.seed, 'camera': prepared.camera.to_dict(), 'steps': prepared.plan.steps,
                      'taus': list(prepared.plan.taus), 'denoiser_calls': calls,
                      'guidance': request.guidance, 'strategy': request.strategy.describe(),
                      'final_exact_composite': request.final_exact_composite})
        result.per_hand_mpjpe = self._per_hand_mpjpe(result, prepared)
        return result

    def _per_hand_mpjpe(self, result: RectifiedResult, prepared: PreparedRequest) -> list[Optional[float]]:
        if self.detector is None or not prepared.keypoints:
            return [None] * len(prepared.regions)
        values = []
        detections = self.detector.detect(result.image, prepared.regions, hints=prepared.keypoints)
        for truth, detection in zip(prepared.keypoints, detections):
            values.append(mpjpe(truth, detection.keypoints) if detection.found else None)
        return values

    def rectify(self, request: InpaintRequest, camera: Optional[PinholeCamera] = None) -> RectifiedResult:
        """
        Полный конвейер исправления с фиксированной или адаптивной силой.

        Если рук не найдено, возвращается копия входа с предупреждением.
        """
        prepared = self.prepare(request, camera)
        if prepared is None:
            logger.warning('No hands found; returning the input unchanged')
            return RectifiedResult(image=request.image.copy(), strength=None,
                                   metadata={'seed': request.seed, 'steps': 0, 'denoiser_calls': 0},
                                   warnings=['no hands found'])
        strategy = request.strategy
        if isinstance(strategy, AdaptiveStrength):
            if self.detector is None or not prepared.keypoints:
                raise DetectorUnavailableError('Adaptive strength needs a keypoint detector and a regressor')
            _, result = adaptive_strength(
                lambda _request, strength: self.rectify_with_strength(prepared, strength),
                self.detector, request, prepared.keypoints, strategy.candidates, strategy.factor,
                strategy.reference_strength)
        else:
            result = self.rectify_with_strength(prepared, strategy.strength)
        logger.info(f'Rectified {len(prepared.regions)} hand(s) at strength {result.strength}, '
                    f'mpjpe={result.mpjpe}')
        return result

    def phase_sweep(self, request: InpaintRequest, strengths: Sequence[float], max_workers: int = 1,
                    camera: Optional[PinholeCamera] = None,
                    extra_metrics: Optional[Callable[[RectifiedResult], dict]] = None) -> PhaseSweepReport:
        """
        Исправление при каждой силе с общим сидом; MPJPE относительно ключевых точек
        исходных мешей и дисперсия текстуры в области руки.

        :param extra_metrics: Дополнительные метрики строки (например, structure_error на глифах).
        """
        prepared = self.prepare(request, camera)
        if prepared is None:
            raise NoHandsFoundError('No hands found for the sweep')

        def measure(result: RectifiedResult) -> Optional[float]:
            if not result.per_hand_mpjpe or None in result.per_hand_mpjpe:
                return None
            return result.mpjpe

        def auxiliary(result: RectifiedResult) -> dict:
            metrics = {'texture_variance': texture_variance(result.image, prepared.condition.mask.pixel_mask)}
            if extra_metrics is not None:
                metrics.update(extra_metrics(result))
            return metrics

        return phase_sweep(lambda strength: self.rectify_with_strength(prepared, strength), strengths,
                           measure, auxiliary, max_workers, request.seed)


@dataclass(eq=False)
class RefinerBackend:
    """
    Набор загруженных моделей; возвращается загрузчиком бэкенда из настроек.
    """
    denoiser: Denoiser
    control_branch: ControlBranch
    codec: Codec
    text_encoder: TextEncoder
    schedule: NoiseSchedule
    localizer: Optional[HandLocalizer] = None
    detector: Optional[KeypointDetector] = None
    regressor: Optional[KeypointRegressor] = None
    camera: Optional[PinholeCamera] = None
    mesh_provider: Optional[MeshProvider] = None
    metadata: dict = field(default_factory=dict)

    def refiner(self, mesh_provider: Optional[MeshProvider] = None,
                camera: Optional[PinholeCamera] = None) -> HandRefiner:
        return HandRefiner(self.denoiser, self.control_branch, self.codec, self.text_encoder, self.schedule,
                           mesh_provider=mesh_provider or self.mesh_provider, localizer=self.localizer,
                           detector=self.detector, regressor=self.regressor, camera=camera or self.camera)
