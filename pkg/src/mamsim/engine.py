"""Single-replicate trial execution.

``run_trial`` walks one simulated trial through its schedule: recruit the
burn-in cohort under the initial allocation, then at each look simulate the
new cohort, refit the model on all accumulated data, evaluate the arm and
trial stopping rules against the look's margins, drop decided arms from
recruitment (their data stay in the fit), update allocation probabilities
(response-adaptive or rescaled fixed weights), and finish with the final
analysis at the maximum sample size unless the trial stopped early.

The function is pure in (validated spec, seed): rerunning it reproduces the
same result bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datagen, glm, rules
from .config import ValidatedSpec
from .datagen import Cohort, substream
from .rules import ArmDecision, RuleContext

STOP_ALL_DECIDED = "all_decided"
STOP_TRIAL_EFFICACY = "trial_rule_efficacy"
STOP_TRIAL_FUTILITY = "trial_rule_futility"
STOP_REACHED_MAX = "reached_max"


@dataclass
class LookRecord:
    """State captured at one look (stored when extended >= 1).

    ``allocation`` holds the probabilities that recruited this look's
    cohort; ``active`` reflects the arm status after this look's decisions.
    """

    look_index: int
    is_final: bool
    n_total: int
    n_per_arm: dict[str, int]
    active: dict[str, bool]
    allocation: dict[str, float]
    eff_posterior: dict[str, float | None]
    fut_posterior: dict[str, float | None]
    rar_posterior: dict[str, float | None]
    estimate_mean: dict[str, float | None]
    estimate_sd: dict[str, float | None]
    fit_converged: bool

    def to_dict(self) -> dict:
        return {
            "look_index": self.look_index,
            "is_final": self.is_final,
            "n_total": self.n_total,
            "n_per_arm": self.n_per_arm,
            "active": self.active,
            "allocation": self.allocation,
            "eff_posterior": self.eff_posterior,
            "fut_posterior": self.fut_posterior,
            "rar_posterior": self.rar_posterior,
            "estimate_mean": self.estimate_mean,
            "estimate_sd": self.estimate_sd,
            "fit_converged": self.fit_converged,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LookRecord":
        return cls(**doc)


@dataclass
class TrialResult:
    """Outcome of one simulated trial replicate."""

    seed: int
    arms: tuple[str, ...]
    decisions: dict[str, ArmDecision]
    sample_sizes: dict[str, int]
    total_size: int
    stop_reason: str
    looks_performed: int
    estimate_mean: dict[str, float | None]
    estimate_sd: dict[str, float | None]
    non_converged_fits: int
    history: list[LookRecord] | None = None
    dataset: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "seed": self.seed,
            "arms": list(self.arms),
            "decisions": {
                arm: {
                    "efficacy_met": d.efficacy_met,
                    "futility_met": d.futility_met,
                    "timing": d.timing,
                    "look_index": d.look_index,
                }
                for arm, d in self.decisions.items()
            },
            "sample_sizes": self.sample_sizes,
            "total_size": self.total_size,
            "stop_reason": self.stop_reason,
            "looks_performed": self.looks_performed,
            "estimate_mean": self.estimate_mean,
            "estimate_sd": self.estimate_sd,
            "non_converged_fits": self.non_converged_fits,
        }
        if self.history is not None:
            doc["history"] = [rec.to_dict() for rec in self.history]
        if self.dataset is not None:
            doc["dataset"] = self.dataset
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrialResult":
        return cls(
            seed=doc["seed"],
            arms=tuple(doc["arms"]),
            decisions={
                arm: ArmDecision(
                    efficacy_met=d["efficacy_met"],
                    futility_met=d["futility_met"],
                    timing=d["timing"],
                    look_index=d["look_index"],
                )
                for arm, d in doc["decisions"].items()
            },
            sample_sizes=doc["sample_sizes"],
            total_size=doc["total_size"],
            stop_reason=doc["stop_reason"],
            looks_performed=doc["looks_performed"],
            estimate_mean=doc["estimate_mean"],
            estimate_sd=doc["estimate_sd"],
            non_converged_fits=doc["non_converged_fits"],
            history=[LookRecord.from_dict(r) for r in doc["history"]]
            if "history" in doc
            else None,
            dataset=doc.get("dataset"),
        )


def cohort_sizes(spec) -> list[int]:
    """Recruitment increments implied by the interim schedule plus final."""
    sizes = [spec.interim_recruited[0]]
    sizes += [
        b - a
        for a, b in zip(spec.interim_recruited, spec.interim_recruited[1:])
    ]
    sizes.append(spec.n_max - spec.interim_recruited[-1])
    return sizes


def run_trial(validated: ValidatedSpec, seed: int) -> TrialResult:
    """Simulate one trial replicate under the validated design."""
    spec = validated.spec
    model = spec.model
    arms = model.arm_names
    interventions = model.interventions
    targets = list(spec.which_targets)
    # row position of each target coefficient in the delta matrices
    delta_row = {t: i for i, t in enumerate(targets)}
    direction = {t: spec.alternative[i] for i, t in enumerate(targets)}
    target_arm = {t: arms[t] for t in targets}

    active = {arm: True for arm in arms}
    n_per_arm = {arm: 0 for arm in arms}
    allocation = dict(spec.prob0)
    decisions = {arm: ArmDecision() for arm in interventions}
    est_mean: dict[str, float | None] = {target_arm[t]: None for t in targets}
    est_sd: dict[str, float | None] = {target_arm[t]: None for t in targets}

    cohorts: list[Cohort] = []
    history: list[LookRecord] | None = [] if spec.extended >= 1 else None
    non_converged = 0
    last_converged_fit = None
    stop_reason = STOP_REACHED_MAX
    sizes = cohort_sizes(spec)
    n_looks = len(sizes)
    looks_performed = 0

    for j, m in enumerate(sizes):
        is_final = j == n_looks - 1
        looks_performed = j + 1

        # --- recruit and simulate the new cohort
        weights = {arm: allocation[arm] for arm in arms if active[arm]}
        used_allocation = {arm: weights.get(arm, 0.0) for arm in arms}
        labels = datagen.allocate_arms(
            m, weights, spec.allocation, substream(seed, "look", j, "alloc")
        )
        covs = datagen.simulate_covariates(
            model.covariates, m, substream(seed, "look", j, "covariates")
        )
        x_cohort = glm.design_values(labels, covs, model)
        eta = x_cohort @ np.asarray(spec.beta_true)
        y = datagen.simulate_response(
            eta, model.family, model.link, model.nuisance,
            substream(seed, "look", j, "response"),
        )
        cohorts.append(Cohort(arm=labels, covariates=covs, response=y))
        for arm in arms:
            n_per_arm[arm] += int(np.sum(labels == arm))

        # --- fit on all accumulated data
        data = Cohort.concat(cohorts)
        design, y_all = glm.build_design_matrix(data, model)
        fit = glm.fit_laplace(
            design, y_all, model.family, model.link, model.nuisance
        )

        verdict = "continue"
        eff_post: dict[str, float | None] = {a: None for a in interventions}
        fut_post: dict[str, float | None] = {a: None for a in interventions}
        rar_post: dict[str, float | None] = {a: None for a in interventions}

        if fit.converged:
            last_converged_fit = fit
            active_targets = [t for t in targets if active[target_arm[t]]]

            def tails(delta_matrix):
                probs = {}
                for t in active_targets:
                    delta = delta_matrix[delta_row[t]][j]
                    if delta is not None:
                        probs[t] = glm.marginal_posterior_prob(
                            fit, t, delta, direction[t]
                        )
                return probs

            p_eff = tails(spec.delta_eff)
            p_fut = tails(spec.delta_fut)
            p_rar = tails(spec.delta_rar) if spec.rar_rule is not None else {}
            eff_post.update({target_arm[t]: p for t, p in p_eff.items()})
            fut_post.update({target_arm[t]: p for t, p in p_fut.items()})
            rar_post.update({target_arm[t]: p for t, p in p_rar.items()})

            def ctx_for(prob_by_target):
                eval_targets = sorted(prob_by_target)
                return eval_targets, RuleContext(
                    active=tuple(active[a] for a in arms),
                    posterior=tuple(prob_by_target[t] for t in eval_targets),
                    n=tuple(n_per_arm[a] for a in arms),
                    ref=(True,) + (False,) * len(interventions),
                    prob=tuple(allocation[a] for a in arms if active[a]),
                    m=m,
                    n_max=spec.n_max,
                    look_index=j,
                    is_final=is_final,
                )

            eff_flags: dict[int, bool] = {}
            fut_flags: dict[int, bool] = {}
            if p_eff:
                eval_targets, ctx = ctx_for(p_eff)
                flags = rules.efficacy_arm(ctx, spec.eff_arm_rule)
                eff_flags = dict(zip(eval_targets, flags))
            if p_fut:
                eval_targets, ctx = ctx_for(p_fut)
                flags = rules.futility_arm(ctx, spec.fut_arm_rule)
                fut_flags = dict(zip(eval_targets, flags))

            for t in active_targets:
                hit_eff = bool(eff_flags.get(t, False))
                hit_fut = bool(fut_flags.get(t, False))
                if hit_eff or hit_fut:
                    arm = target_arm[t]
                    decisions[arm].efficacy_met = hit_eff
                    decisions[arm].futility_met = hit_fut
                    decisions[arm].timing = "last" if is_final else "early"
                    decisions[arm].look_index = j
                    active[arm] = False
                    est_mean[arm] = float(fit.marginal_mean[t])
                    est_sd[arm] = float(fit.marginal_sd[t])

            _, trial_ctx = ctx_for({})
            verdict = rules.trial_stop(
                decisions.values(), trial_ctx, spec.eff_trial_rule,
                spec.fut_trial_rule,
            )
        else:
            non_converged += 1

        stopping = not is_final and (
            verdict != "continue" or not any(active[a] for a in interventions)
        )

        # --- allocation for the next cohort
        if not stopping and not is_final:
            live_targets = [t for t in targets if active[target_arm[t]]]
            if spec.rar_rule is None:
                allocation = _rescale({a: spec.prob0[a] for a in arms}, active)
            elif fit.converged and all(t in p_rar for t in live_targets):
                ctx = RuleContext(
                    active=tuple(active[a] for a in arms),
                    posterior=tuple(p_rar[t] for t in live_targets),
                    n=tuple(n_per_arm[a] for a in arms),
                    ref=(True,) + (False,) * len(interventions),
                    prob=tuple(allocation[a] for a in arms if active[a]),
                    m=m,
                    n_max=spec.n_max,
                    look_index=j,
                    is_final=is_final,
                )
                rar_w = rules.rar_weights(ctx, spec.rar_rule)
                probs = rules.normalize_allocation(rar_w)
                allocation = {a: 0.0 for a in arms}
                allocation[arms[0]] = float(probs[0])
                for prob, arm in zip(
                    probs[1:], (a for a in interventions if active[a])
                ):
                    allocation[arm] = float(prob)
            else:
                # non-converged fit or margin disabled at this look: keep the
                # current allocation, restricted to the arms still recruiting
                allocation = _rescale(allocation, active)

        if history is not None:
            history.append(
                LookRecord(
                    look_index=j,
                    is_final=is_final,
                    n_total=sum(n_per_arm.values()),
                    n_per_arm=dict(n_per_arm),
                    active=dict(active),
                    allocation=used_allocation,
                    eff_posterior=eff_post,
                    fut_posterior=fut_post,
                    rar_posterior=rar_post,
                    estimate_mean={
                        target_arm[t]: (float(fit.marginal_mean[t]) if fit.converged else None)
                        for t in targets
                    },
                    estimate_sd={
                        target_arm[t]: (float(fit.marginal_sd[t]) if fit.converged else None)
                        for t in targets
                    },
                    fit_converged=fit.converged,
                )
            )

        if stopping:
            if verdict == "stop_efficacy":
                stop_reason = STOP_TRIAL_EFFICACY
            elif verdict == "stop_futility":
                stop_reason = STOP_TRIAL_FUTILITY
            else:
                stop_reason = STOP_ALL_DECIDED
            break

    # estimates for undecided targets come from the last converged fit
    for t in targets:
        arm = target_arm[t]
        if est_mean[arm] is None and last_converged_fit is not None:
            est_mean[arm] = float(last_converged_fit.marginal_mean[t])
            est_sd[arm] = float(last_converged_fit.marginal_sd[t])

    dataset = None
    if spec.extended >= 2:
        data = Cohort.concat(cohorts)
        dataset = {
            "arm": data.arm.tolist(),
            "covariates": {k: v.tolist() for k, v in data.covariates.items()},
            "response": data.response.tolist(),
        }

    return TrialResult(
        seed=seed,
        arms=interventions,
        decisions=decisions,
        sample_sizes=dict(n_per_arm),
        total_size=sum(n_per_arm.values()),
        stop_reason=stop_reason,
        looks_performed=looks_performed,
        estimate_mean=est_mean,
        estimate_sd=est_sd,
        non_converged_fits=non_converged,
        history=history,
        dataset=dataset,
    )


def _rescale(weights: dict[str, float], active: dict[str, bool]) -> dict[str, float]:
    """Restrict weights to active arms and renormalise; dropped arms get 0."""
    live = [a for a in weights if active[a]]
    total = sum(abs(weights[a]) for a in live)
    if total == 0.0:
        # every remaining arm carried zero weight; fall back to equal shares
        return {a: (1.0 / len(live) if active[a] else 0.0) for a in weights}
    return {
        a: (abs(weights[a]) / total if active[a] else 0.0) for a in weights
    }
