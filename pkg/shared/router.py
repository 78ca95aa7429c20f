import argparse

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from config.settings import RunConfig

Handler = Callable[[argparse.Namespace], int | None]


@dataclass(frozen=True)
class Argument:
    flags: Tuple[str, ...]
    options: Dict[str, Any] = field(default_factory=dict)


def argument(*flags: str, **options: Any) -> Argument:
    return Argument(flags=flags, options=options)


@dataclass(frozen=True)
class Route:
    name: str
    help: str
    handler: Handler
    arguments: Tuple[Argument, ...] = ()


class CommandRouter:
    """Collects sub-commands; main mounts every router on one parser"""
    
    def __init__(self, tags: Optional[List[str]] = None):
        self.tags = tags or []
        self.routes: List[Route] = []
    
    def command(self, name: str, help: str, arguments: Sequence[Argument] = ()) -> Callable[[Handler], Handler]:
        def decorator(handler: Handler) -> Handler:
            self.routes.append(Route(name=name, help=help, handler=handler, arguments=tuple(arguments)))
            return handler
        return decorator
    
    def mount(self, subparsers, parents: Sequence[argparse.ArgumentParser] = ()) -> None:
        for route in self.routes:
            parser = subparsers.add_parser(route.name, help=route.help, parents=list(parents))
            for arg in route.arguments:
                parser.add_argument(*arg.flags, **arg.options)
            parser.set_defaults(handler=route.handler, command=route.name)


def common_parser() -> argparse.ArgumentParser:
    """Flags every sub-command accepts; given flags override the config file"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", metavar="PATH", help="TOML run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--target", metavar="CITY", help="target city id")
    parser.add_argument("--order", choices=["first", "second"], help="meta-gradient order")
    parser.add_argument("--gamma-floor", dest="gamma_floor", type=float)
    parser.add_argument("-l", dest="l", type=int, help="leading category layers to freeze (embedding = 1)")
    parser.add_argument("-n", dest="n", type=int, help="fresh recurrent layers to append")
    parser.add_argument("--local-steps", dest="local_steps", type=int)
    parser.add_argument("--iters", type=int, help="meta-training iterations")
    parser.add_argument("-N", dest="N", type=int, help="sequences per support and per query set")
    parser.add_argument("--plot", action="store_true", default=None, help="render charts when matplotlib is available")
    parser.add_argument("--log-level", dest="log_level", help="overrides CITYTRANSFER_LOG_LEVEL")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(args.config).with_overrides(
        seed=args.seed,
        out=args.out,
        target=args.target,
        order=args.order,
        gamma_floor=args.gamma_floor,
        l=args.l,
        n=args.n,
        local_steps=args.local_steps,
        iters=args.iters,
        N=args.N,
        plot=args.plot
    )
